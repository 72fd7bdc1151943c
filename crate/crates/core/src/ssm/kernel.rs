//! Diagonal selective-scan kernels.
//!
//! Per channel `d` and state index `n` the recurrence is
//!
//! ```text
//!   x_t = exp(delta_t * A) * x_{t-1} + delta_t * B_t * u_t
//!   y_t = sum_n C_t[n] * x_t[n]
//! ```
//!
//! Two execution strategies exist: a plain sequential sweep, and a chunked
//! sweep that scans each block of `K` steps from a zero state, then stitches
//! blocks together by carrying the boundary state through the block's
//! cumulative decay. They agree up to floating-point rounding.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanStrategy {
    Sequential,
    Chunked(usize),
}

impl Default for ScanStrategy {
    fn default() -> Self {
        ScanStrategy::Chunked(16)
    }
}

/// Latent state `x` of shape `[D, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanState<T: Real> {
    pub x: Tensor<T>,
}

impl<T: Real> ScanState<T> {
    pub fn zeros(d_inner: usize, n: usize) -> Self {
        Self {
            x: Tensor::zeros(vec![d_inner, n]),
        }
    }
}

/// Zero-order hold for `A` and Euler for `B`:
/// `abar[t,d,n] = exp(delta[t,d] * a[d,n])`, `bbar[t,d,n] = delta[t,d] * b[t,n]`.
pub fn discretize<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    delta: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if a.rank() != 2 || b.rank() != 2 || delta.rank() != 2 {
        return shape_err("discretize expects a [D,N], b [L,N], delta [L,D]");
    }
    let (d, n) = (a.dim(0), a.dim(1));
    let l = delta.dim(0);
    if delta.dim(1) != d || b.dim(0) != l || b.dim(1) != n {
        return shape_err(format!(
            "discretize: a {:?}, b {:?}, delta {:?} are inconsistent",
            a.shape(),
            b.shape(),
            delta.shape()
        ));
    }
    if let Some(bad) = delta.data().iter().find(|v| !(**v > T::zero())) {
        return Err(Error::Contract(format!(
            "step size must be positive, got {bad}"
        )));
    }
    let mut abar = Vec::with_capacity(l * d * n);
    let mut bbar = Vec::with_capacity(l * d * n);
    for t in 0..l {
        for di in 0..d {
            let dt = delta.data()[t * d + di];
            for ni in 0..n {
                abar.push((dt * a.data()[di * n + ni]).exp());
                bbar.push(dt * b.data()[t * n + ni]);
            }
        }
    }
    Ok((
        Tensor::new(vec![l, d, n], abar)?,
        Tensor::new(vec![l, d, n], bbar)?,
    ))
}

/// Runs the recurrence over already-discretized parameters.
/// Shapes: `abar, bbar [L,D,N]`, `c [L,N]`, `u [L,D]`; returns `y [L,D]` and the final state.
pub fn ssm_scan<T: Real>(
    abar: &Tensor<T>,
    bbar: &Tensor<T>,
    c: &Tensor<T>,
    u: &Tensor<T>,
    x0: Option<&ScanState<T>>,
    strategy: ScanStrategy,
) -> Result<(Tensor<T>, ScanState<T>)> {
    if abar.rank() != 3 || abar.shape() != bbar.shape() {
        return shape_err("ssm_scan: abar and bbar must both be [L,D,N]");
    }
    let (l, d, n) = (abar.dim(0), abar.dim(1), abar.dim(2));
    if c.shape() != [l, n] || u.shape() != [l, d] {
        return shape_err(format!(
            "ssm_scan: c {:?} / u {:?} inconsistent with [L={l},D={d},N={n}]",
            c.shape(),
            u.shape()
        ));
    }
    let mut state = match x0 {
        Some(s) if s.x.shape() != [d, n] => {
            return shape_err(format!(
                "ssm_scan: initial state {:?}, expected [{d},{n}]",
                s.x.shape()
            ))
        }
        Some(s) => s.x.data().to_vec(),
        None => vec![T::zero(); d * n],
    };
    let mut y = vec![T::zero(); l * d];
    let dn = d * n;
    // drive x_t = abar_t * x_{t-1} + bbar_t * u_t for one block, from `start` state
    let step = |t: usize, x: &mut [T], y_row: &mut [T]| {
        let ab = &abar.data()[t * dn..(t + 1) * dn];
        let bb = &bbar.data()[t * dn..(t + 1) * dn];
        let ct = &c.data()[t * n..(t + 1) * n];
        for di in 0..d {
            let ut = u.data()[t * d + di];
            let mut acc = T::zero();
            for ni in 0..n {
                let k = di * n + ni;
                x[k] = ab[k] * x[k] + bb[k] * ut;
                acc += ct[ni] * x[k];
            }
            y_row[di] = acc;
        }
    };
    match strategy {
        ScanStrategy::Sequential => {
            for t in 0..l {
                step(t, &mut state, &mut y[t * d..(t + 1) * d]);
            }
        }
        ScanStrategy::Chunked(k) => {
            let k = k.max(1);
            let mut local = vec![T::zero(); dn];
            let mut decay = vec![T::zero(); dn];
            let mut states = vec![T::zero(); k * dn];
            let mut decays = vec![T::zero(); k * dn];
            for start in (0..l).step_by(k) {
                let end = (start + k).min(l);
                // intra-block scan from zero plus running decay products
                local.iter_mut().for_each(|v| *v = T::zero());
                decay.iter_mut().for_each(|v| *v = T::one());
                for t in start..end {
                    let ab = &abar.data()[t * dn..(t + 1) * dn];
                    let bb = &bbar.data()[t * dn..(t + 1) * dn];
                    let j = t - start;
                    for di in 0..d {
                        let ut = u.data()[t * d + di];
                        for ni in 0..n {
                            let q = di * n + ni;
                            local[q] = ab[q] * local[q] + bb[q] * ut;
                            decay[q] *= ab[q];
                        }
                    }
                    states[j * dn..(j + 1) * dn].copy_from_slice(&local);
                    decays[j * dn..(j + 1) * dn].copy_from_slice(&decay);
                }
                // stitch with the carried boundary state
                for t in start..end {
                    let j = t - start;
                    let ct = &c.data()[t * n..(t + 1) * n];
                    for di in 0..d {
                        let mut acc = T::zero();
                        for ni in 0..n {
                            let q = di * n + ni;
                            let x = states[j * dn + q] + decays[j * dn + q] * state[q];
                            acc += ct[ni] * x;
                        }
                        y[t * d + di] = acc;
                    }
                }
                let last = (end - start - 1) * dn;
                for q in 0..dn {
                    state[q] = states[last + q] + decays[last + q] * state[q];
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![l, d], y)?,
        ScanState {
            x: Tensor::new(vec![d, n], state)?,
        },
    ))
}

struct FusedDims {
    s: usize,
    l: usize,
    d: usize,
    n: usize,
}

fn fused_dims<T: Real>(
    u: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
) -> Result<FusedDims> {
    if u.rank() != 3 || a.rank() != 2 {
        return shape_err("selective_scan expects u [S,L,D] and a [D,N]");
    }
    let (s, l, d) = (u.dim(0), u.dim(1), u.dim(2));
    let n = a.dim(1);
    if delta.shape() != u.shape()
        || a.dim(0) != d
        || b.shape() != [s, l, n]
        || c.shape() != [s, l, n]
    {
        return shape_err(format!(
            "selective_scan: u {:?}, delta {:?}, a {:?}, b {:?}, c {:?} inconsistent",
            u.shape(),
            delta.shape(),
            a.shape(),
            b.shape(),
            c.shape()
        ));
    }
    Ok(FusedDims { s, l, d, n })
}

/// One sequence of the fused scan. Optionally records every state `x_t`.
#[allow(clippy::too_many_arguments)]
fn fused_sequence<T: Real>(
    dims: &FusedDims,
    u: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    strategy: ScanStrategy,
    y: &mut [T],
    mut record: Option<&mut [T]>,
) {
    let (l, d, n) = (dims.l, dims.d, dims.n);
    let dn = d * n;
    let mut x = vec![T::zero(); dn];
    match strategy {
        ScanStrategy::Chunked(k) if record.is_none() => {
            let k = k.max(1);
            let mut local = vec![T::zero(); k * dn];
            let mut decay = vec![T::zero(); k * dn];
            for start in (0..l).step_by(k) {
                let end = (start + k).min(l);
                for t in start..end {
                    let j = t - start;
                    let bt = &b[t * n..(t + 1) * n];
                    let (prev, cur) = local.split_at_mut(j * dn);
                    let (prev_p, cur_p) = decay.split_at_mut(j * dn);
                    for di in 0..d {
                        let dt = delta[t * d + di];
                        let du = dt * u[t * d + di];
                        let ad = &a[di * n..(di + 1) * n];
                        let lo = &mut cur[di * n..(di + 1) * n];
                        let po = &mut cur_p[di * n..(di + 1) * n];
                        if j == 0 {
                            for (((lq, pq), &aq), &bq) in
                                lo.iter_mut().zip(po.iter_mut()).zip(ad).zip(bt)
                            {
                                let ab = (dt * aq).fast_exp();
                                *lq = du * bq;
                                *pq = ab;
                            }
                        } else {
                            let li = &prev[(j - 1) * dn + di * n..(j - 1) * dn + (di + 1) * n];
                            let pi = &prev_p[(j - 1) * dn + di * n..(j - 1) * dn + (di + 1) * n];
                            for (((((lq, pq), &aq), &bq), &lp), &pp) in lo
                                .iter_mut()
                                .zip(po.iter_mut())
                                .zip(ad)
                                .zip(bt)
                                .zip(li)
                                .zip(pi)
                            {
                                let ab = (dt * aq).fast_exp();
                                *lq = ab * lp + du * bq;
                                *pq = ab * pp;
                            }
                        }
                    }
                }
                for t in start..end {
                    let j = t - start;
                    let ct = &c[t * n..(t + 1) * n];
                    for di in 0..d {
                        let q = j * dn + di * n;
                        let mut acc = T::zero();
                        for (((&cq, &lq), &pq), &xq) in ct
                            .iter()
                            .zip(&local[q..q + n])
                            .zip(&decay[q..q + n])
                            .zip(&x[di * n..(di + 1) * n])
                        {
                            acc += cq * (lq + pq * xq);
                        }
                        y[t * d + di] = acc;
                    }
                }
                let q = (end - start - 1) * dn;
                for ((xq, &lq), &pq) in x.iter_mut().zip(&local[q..q + dn]).zip(&decay[q..q + dn]) {
                    *xq = lq + pq * *xq;
                }
            }
        }
        _ => {
            for t in 0..l {
                let bt = &b[t * n..(t + 1) * n];
                let ct = &c[t * n..(t + 1) * n];
                for di in 0..d {
                    let dt = delta[t * d + di];
                    let du = dt * u[t * d + di];
                    let mut acc = T::zero();
                    for (((xq, &aq), &bq), &cq) in x[di * n..(di + 1) * n]
                        .iter_mut()
                        .zip(&a[di * n..(di + 1) * n])
                        .zip(bt)
                        .zip(ct)
                    {
                        *xq = (dt * aq).fast_exp() * *xq + du * bq;
                        acc += cq * *xq;
                    }
                    y[t * d + di] = acc;
                }
                if let Some(rec) = record.as_deref_mut() {
                    rec[t * dn..(t + 1) * dn].copy_from_slice(&x);
                }
            }
        }
    }
}

/// Fused discretize + scan over `S` independent sequences.
pub fn selective_scan_forward<T: Real>(
    u: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    strategy: ScanStrategy,
) -> Result<Tensor<T>> {
    let dims = fused_dims(u, delta, a, b, c)?;
    let (l, d, n) = (dims.l, dims.d, dims.n);
    let mut y = vec![T::zero(); u.numel()];
    if l > 0 && d > 0 {
        y.par_chunks_mut(l * d).enumerate().for_each(|(si, ys)| {
            let sd = si * l * d..(si + 1) * l * d;
            let sn = si * l * n..(si + 1) * l * n;
            fused_sequence(
                &dims,
                &u.data()[sd.clone()],
                &delta.data()[sd],
                a.data(),
                &b.data()[sn.clone()],
                &c.data()[sn],
                strategy,
                ys,
                None,
            );
        });
    }
    Tensor::new(u.shape().to_vec(), y)
}

/// Gradients of the fused scan with respect to `[u, delta, a, b, c]`.
pub fn selective_scan_backward<T: Real>(
    u: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let dims = fused_dims(u, delta, a, b, c)?;
    let (s, l, d, n) = (dims.s, dims.l, dims.d, dims.n);
    let dn = d * n;
    let ad = a.data();

    struct Partial<T> {
        gu: Vec<T>,
        gdelta: Vec<T>,
        gb: Vec<T>,
        gc: Vec<T>,
        ga: Vec<T>,
    }

    let partials: Vec<Partial<T>> = (0..s)
        .into_par_iter()
        .map(|si| {
            let sd = si * l * d..(si + 1) * l * d;
            let sn = si * l * n..(si + 1) * l * n;
            let (us, ds) = (&u.data()[sd.clone()], &delta.data()[sd.clone()]);
            let (bs, cs) = (&b.data()[sn.clone()], &c.data()[sn]);
            let gys = &gy.data()[sd];
            let mut states = vec![T::zero(); l * dn];
            let mut y = vec![T::zero(); l * d];
            fused_sequence(
                &dims,
                us,
                ds,
                ad,
                bs,
                cs,
                ScanStrategy::Sequential,
                &mut y,
                Some(&mut states),
            );

            let mut p = Partial {
                gu: vec![T::zero(); l * d],
                gdelta: vec![T::zero(); l * d],
                gb: vec![T::zero(); l * n],
                gc: vec![T::zero(); l * n],
                ga: vec![T::zero(); dn],
            };
            let mut h = vec![T::zero(); dn];
            let zeros = vec![T::zero(); dn];
            let mut ab = vec![T::zero(); n];
            let mut gx = vec![T::zero(); n];
            let mut gab = vec![T::zero(); n];
            for t in (0..l).rev() {
                let bt = &bs[t * n..(t + 1) * n];
                let ct = &cs[t * n..(t + 1) * n];
                let x_t = &states[t * dn..(t + 1) * dn];
                let x_prev = if t > 0 {
                    &states[(t - 1) * dn..t * dn]
                } else {
                    &zeros[..]
                };
                for di in 0..d {
                    let dt = ds[t * d + di];
                    let ut = us[t * d + di];
                    let g = gys[t * d + di];
                    let r = di * n..(di + 1) * n;
                    let (ar, hr, xt, xp) = (
                        &ad[r.clone()],
                        &mut h[r.clone()],
                        &x_t[r.clone()],
                        &x_prev[r.clone()],
                    );
                    for (e, &aq) in ab.iter_mut().zip(ar) {
                        *e = (dt * aq).fast_exp();
                    }
                    for ((o, &cq), &hq) in gx.iter_mut().zip(ct).zip(hr.iter()) {
                        *o = g * cq + hq;
                    }
                    for (((o, &gq), &xq), &e) in gab.iter_mut().zip(&gx).zip(xp).zip(&ab) {
                        *o = gq * xq * e;
                    }
                    for ((hq, &gq), &e) in hr.iter_mut().zip(&gx).zip(&ab) {
                        *hq = gq * e;
                    }
                    for (gcq, &xq) in p.gc[t * n..(t + 1) * n].iter_mut().zip(xt) {
                        *gcq += g * xq;
                    }
                    for (gaq, &gq) in p.ga[r.clone()].iter_mut().zip(&gab) {
                        *gaq += gq * dt;
                    }
                    let du = dt * ut;
                    for (gbq, &gq) in p.gb[t * n..(t + 1) * n].iter_mut().zip(&gx) {
                        *gbq += gq * du;
                    }
                    let mut gdt = T::zero();
                    let mut gub = T::zero();
                    for (((&gq, &ga), &aq), &bq) in gx.iter().zip(&gab).zip(ar).zip(bt) {
                        gdt += ga * aq;
                        gub += gq * bq;
                    }
                    p.gdelta[t * d + di] = gdt + gub * ut;
                    p.gu[t * d + di] = gub * dt;
                }
            }
            p
        })
        .collect();

    let mut gu = Vec::with_capacity(u.numel());
    let mut gdelta = Vec::with_capacity(u.numel());
    let mut gb = Vec::with_capacity(b.numel());
    let mut gc = Vec::with_capacity(c.numel());
    let mut ga = vec![T::zero(); dn];
    for p in partials {
        gu.extend(p.gu);
        gdelta.extend(p.gdelta);
        gb.extend(p.gb);
        gc.extend(p.gc);
        for (acc, v) in ga.iter_mut().zip(p.ga) {
            *acc += v;
        }
    }
    Ok(vec![
        Tensor::new(u.shape().to_vec(), gu)?,
        Tensor::new(delta.shape().to_vec(), gdelta)?,
        Tensor::new(a.shape().to_vec(), ga)?,
        Tensor::new(b.shape().to_vec(), gb)?,
        Tensor::new(c.shape().to_vec(), gc)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn geometric_decay_impulse() {
        let abar = t(vec![3, 1, 1], &[0.5; 3]);
        let bbar = t(vec![3, 1, 1], &[1.0; 3]);
        let c = t(vec![3, 1], &[1.0; 3]);
        let u = t(vec![3, 1], &[1.0, 0.0, 0.0]);
        for s in [ScanStrategy::Sequential, ScanStrategy::Chunked(2)] {
            let (y, _) = ssm_scan(&abar, &bbar, &c, &u, None, s).unwrap();
            assert_eq!(y.data(), &[1.0, 0.5, 0.25]);
        }
    }

    #[test]
    fn zero_decay_is_memoryless() {
        let abar = t(vec![2, 1, 2], &[0.0; 4]);
        let bbar = t(vec![2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let c = t(vec![2, 2], &[0.5, 1.0, -1.0, 2.0]);
        let u = t(vec![2, 1], &[2.0, -1.0]);
        let (y, _) = ssm_scan(&abar, &bbar, &c, &u, None, ScanStrategy::Sequential).unwrap();
        assert_eq!(
            y.data(),
            &[
                (0.5 * 1.0 + 1.0 * 2.0) * 2.0,
                (-1.0 * 3.0 + 2.0 * 4.0) * -1.0
            ]
        );
    }

    #[test]
    fn discretize_half_decay() {
        let a = t(vec![1, 1], &[-1.0]);
        let b = t(vec![1, 1], &[3.0]);
        let delta = t(vec![1, 1], &[std::f64::consts::LN_2]);
        let (abar, bbar) = discretize(&a, &b, &delta).unwrap();
        assert!((abar.data()[0] - 0.5).abs() < 1e-15);
        assert!((bbar.data()[0] - 3.0 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn discretize_small_step_limit() {
        let a = t(vec![1, 2], &[-1.0, -16.0]);
        let b = t(vec![1, 2], &[1.0, 1.0]);
        let delta = t(vec![1, 1], &[1e-12]);
        let (abar, bbar) = discretize(&a, &b, &delta).unwrap();
        assert!(abar.data().iter().all(|v| (v - 1.0).abs() < 1e-10));
        assert!(bbar.data().iter().all(|v| v.abs() < 1e-11));
    }

    #[test]
    fn discretize_rejects_nonpositive_step() {
        let a = t(vec![1, 1], &[-1.0]);
        let b = t(vec![1, 1], &[1.0]);
        let delta = t(vec![1, 1], &[0.0]);
        assert!(matches!(
            discretize(&a, &b, &delta),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn scan_carries_initial_state() {
        let abar = t(vec![2, 1, 1], &[0.5, 0.5]);
        let bbar = t(vec![2, 1, 1], &[1.0, 1.0]);
        let c = t(vec![2, 1], &[1.0, 1.0]);
        let u = t(vec![2, 1], &[0.0, 0.0]);
        let x0 = ScanState {
            x: t(vec![1, 1], &[4.0]),
        };
        for s in [ScanStrategy::Sequential, ScanStrategy::Chunked(1)] {
            let (y, fin) = ssm_scan(&abar, &bbar, &c, &u, Some(&x0), s).unwrap();
            assert_eq!(y.data(), &[2.0, 1.0]);
            assert_eq!(fin.x.data(), &[1.0]);
        }
    }
}
