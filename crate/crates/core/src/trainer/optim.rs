//! Adam with decoupled weight decay.

use crate::autodiff::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Debug)]
pub struct AdamW {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Real>(
        store: &ParamStore<T>,
        betas: (f64, f64),
        eps: f64,
        weight_decay: f64,
    ) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            betas,
            eps,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update from the gradients held in `store`.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, lr: f64) {
        self.step += 1;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let decay = 1.0 - lr * self.weight_decay;
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grads = p.grad.data().to_vec();
            for (((w, g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grads)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let g = g.f64();
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let upd = lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                *w = T::of(w.f64() * decay - upd);
            }
        }
    }
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Real>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if norm > max_norm {
        let s = T::of(max_norm / (norm + 1e-6));
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = ParamStore::<f64>::new();
        let id = s
            .add("w", Tensor::from_f64(vec![2], &[1.0, -1.0]).unwrap())
            .unwrap();
        s.get_mut(id).grad = Tensor::from_f64(vec![2], &[0.5, -3.0]).unwrap();
        let mut opt = AdamW::new(&s, (0.8, 0.99), 1e-12, 0.0);
        opt.step(&mut s, 0.1);
        let w = s.get(id).value.data();
        assert!((w[0] - 0.9).abs() < 1e-9 && (w[1] + 0.9).abs() < 1e-9);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::zeros(vec![2])).unwrap();
        s.get_mut(id).grad = Tensor::from_f64(vec![2], &[30.0, 40.0]).unwrap();
        assert_eq!(clip_grad_norm(&mut s, 5.0), 50.0);
        assert!((s.grad_norm() - 5.0).abs() < 1e-6);
    }
}
