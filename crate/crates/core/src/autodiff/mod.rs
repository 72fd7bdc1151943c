//! Minimal tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operator application in evaluation order;
//! [`Graph::backward`] walks the tape in reverse, calling each operator's
//! vector-Jacobian product. Parameters live outside the graph in a
//! [`ParamStore`] so that one store can feed many short-lived graphs.

pub mod conv;
pub mod gradcheck;
pub mod ops;
mod params;

pub use conv::{Conv2dAttrs, ConvTranspose2dAttrs};
pub use ops::{Op, OpKind};
pub use params::{ParamId, ParamStore, Parameter};

use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::ssm::kernel::ScanStrategy;
use crate::tensor::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<T: Real> {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(Var, ParamId)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds every parameter gradient into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for &(v, id) in &self.params {
            if let Some(g) = self.get(v) {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn inputs(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].inputs
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Test hook: scales the backward pass of every `kind` node by 1.5.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; gradients are not propagated into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false, None)
    }

    /// Differentiable input that is not a stored parameter.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true, None)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.leaf(store.get(id).value.clone(), true, Some(id))
    }

    /// Applies a catalog operator.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let value = {
            let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            ops::forward(&op, &vals)?
        };
        debug_assert!(
            value.all_finite() || !inputs.iter().all(|v| self.nodes[v.0].value.all_finite()),
            "{} produced non-finite values from finite inputs",
            op.kind()
        );
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            value,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        let mut params = Vec::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if let Some(id) = node.param {
                params.push((Var(i), id));
            }
            if node.inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let vals: Vec<&Tensor<T>> =
                node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            let need: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let mut input_grads = ops::backward(&node.op, &vals, &node.value, &g, &need)?;
            if self.fault == Some(node.op.kind()) {
                let k = T::of(1.5);
                for t in input_grads.iter_mut().flatten() {
                    t.data_mut().iter_mut().for_each(|v| *v *= k);
                }
            }
            for (inp, gi) in node.inputs.iter().zip(input_grads) {
                let Some(gi) = gi else { continue };
                if !self.nodes[inp.0].requires_grad {
                    continue;
                }
                match &mut grads[inp.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot => *slot = Some(gi),
                }
            }
        }
        Ok(Gradients { grads, params })
    }

    /// Backward pass that accumulates parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.backward(loss)?.accumulate_into(store);
        Ok(())
    }

    // Convenience wrappers over `apply`.

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, attrs: Conv2dAttrs) -> Result<Var> {
        self.apply(Op::Conv2d(attrs), &with_bias(x, w, b))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        attrs: ConvTranspose2dAttrs,
    ) -> Result<Var> {
        self.apply(Op::ConvTranspose2d(attrs), &with_bias(x, w, b))
    }

    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.apply(Op::DepthwiseConv1d, &with_bias(x, w, b))
    }

    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        pad_left: usize,
        pad_right: usize,
    ) -> Result<Var> {
        self.apply(
            Op::ConvTranspose1d {
                pad_left,
                pad_right,
            },
            &with_bias(x, w, b),
        )
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.apply(Op::Dense, &with_bias(x, w, b))
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.apply(Op::InstanceNorm { eps }, &[x, gamma, beta])
    }

    pub fn rms_norm(&mut self, x: Var, w: Var, eps: f64) -> Result<Var> {
        self.apply(Op::RmsNorm { eps }, &[x, w])
    }

    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        self.apply(Op::PRelu, &[x, slope])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Silu, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Softplus, &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Exp, &[x])
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Cos, &[x])
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sin, &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Abs, &[x])
    }

    pub fn pow(&mut self, x: Var, exponent: f64) -> Result<Var> {
        self.apply(Op::Pow { exponent }, &[x])
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.apply(Op::Affine { scale, shift }, &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    pub fn atan2(&mut self, y: Var, x: Var) -> Result<Var> {
        self.apply(Op::Atan2, &[y, x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat { axis }, xs)
    }

    pub fn flip(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Op::Flip { axis }, &[x])
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(Op::Slice { axis, start, end }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(Op::Reshape { shape }, &[x])
    }

    pub fn permute(&mut self, x: Var, perm: Vec<usize>) -> Result<Var> {
        self.apply(Op::Permute { perm }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Mean, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sum, &[x])
    }

    pub fn batched_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::BatchedMatmul, &[a, b])
    }

    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        strategy: ScanStrategy,
    ) -> Result<Var> {
        self.apply(Op::SelectiveScan { strategy }, &[u, delta, a, b, c])
    }

    /// Waveform of `out_len` samples from a `[T, F]` real/imaginary pair.
    pub fn istft(&mut self, re: Var, im: Var, cfg: &StftConfig, out_len: usize) -> Result<Var> {
        self.apply(
            Op::Istft {
                cfg: cfg.clone(),
                out_len,
            },
            &[re, im],
        )
    }

    /// `mean((a - b)^2)`
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }
}

fn with_bias(x: Var, w: Var, b: Option<Var>) -> Vec<Var> {
    match b {
        Some(b) => vec![x, w, b],
        None => vec![x, w],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_gradient_is_input() {
        let mut store = ParamStore::<f64>::new();
        let w = store
            .add("w", Tensor::from_f64(vec![3], &[0.5, -1.0, 2.0]).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let x = g.constant(Tensor::from_f64(vec![3], &[1.0, 2.0, 3.0]).unwrap());
        let p = g.mul(wv, x).unwrap();
        let loss = g.sum(p).unwrap();
        g.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.get(w).grad.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn mse_gradient_closed_form() {
        let mut store = ParamStore::<f64>::new();
        let wd = [0.3, -0.7, 1.1, 2.0];
        let td = [1.0, 0.0, -1.0, 0.5];
        let w = store
            .add("w", Tensor::from_f64(vec![4], &wd).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let t = g.constant(Tensor::from_f64(vec![4], &td).unwrap());
        let loss = g.mse(wv, t).unwrap();
        g.backward_into(loss, &mut store).unwrap();
        for i in 0..4 {
            let expect = 2.0 * (wd[i] - td[i]) / 4.0;
            assert!((store.get(w).grad.data()[i] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_twice_doubles_exactly() {
        let mut store = ParamStore::<f64>::new();
        let w = store
            .add("w", Tensor::from_f64(vec![3], &[0.1, 0.2, -0.4]).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let s = g.sigmoid(wv).unwrap();
        let e = g.exp(s).unwrap();
        let loss = g.sum(e).unwrap();
        g.backward_into(loss, &mut store).unwrap();
        let once = store.get(w).grad.clone();
        g.backward_into(loss, &mut store).unwrap();
        for (a, b) in store.get(w).grad.data().iter().zip(once.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(vec![2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_input_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let w = store
            .add("w", Tensor::from_f64(vec![1], &[3.0]).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let wv = g.param(&store, w);
        let sq = g.mul(wv, wv).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.get(w).grad.data(), &[6.0]);
    }
}
