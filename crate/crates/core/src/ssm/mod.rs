//! Selective state-space layer: input-dependent `(delta, B, C)`, zero-order
//! hold discretization of a negative diagonal `A`, and the scan.

pub mod kernel;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::ops::softplus;
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

pub use kernel::{
    discretize, selective_scan_backward, selective_scan_forward, ssm_scan, ScanState, ScanStrategy,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct S6Config {
    pub d_inner: usize,
    pub n_state: usize,
    /// Rank of the step-size projection; `None` means `max(1, d_inner / 16)`.
    pub dt_rank: Option<usize>,
    pub dt_min: f64,
    pub dt_max: f64,
    pub strategy: ScanStrategy,
}

impl Default for S6Config {
    fn default() -> Self {
        Self {
            d_inner: 128,
            n_state: 16,
            dt_rank: None,
            dt_min: 1e-3,
            dt_max: 0.1,
            strategy: ScanStrategy::default(),
        }
    }
}

impl S6Config {
    pub fn rank(&self) -> usize {
        self.dt_rank.unwrap_or((self.d_inner / 16).max(1))
    }
}

/// Plain-tensor weights of one selective SSM.
#[derive(Clone, Debug, PartialEq)]
pub struct S6Params<T: Real> {
    /// `[D, N]`, with `A = -exp(a_log)`.
    pub a_log: Tensor<T>,
    /// `[R + 2N, D]`: rows `[0,R)` feed the step projection, then `B`, then `C`.
    pub x_proj: Tensor<T>,
    /// `[D, R]`
    pub dt_proj_weight: Tensor<T>,
    /// `[D]`
    pub dt_proj_bias: Tensor<T>,
}

impl<T: Real> S6Params<T> {
    pub fn d_inner(&self) -> usize {
        self.a_log.dim(0)
    }

    pub fn n_state(&self) -> usize {
        self.a_log.dim(1)
    }

    pub fn rank(&self) -> usize {
        self.dt_proj_weight.dim(1)
    }

    pub fn a(&self) -> Tensor<T> {
        self.a_log.map(|v| -v.exp())
    }
}

fn matmul_t<T: Real>(x: &Tensor<T>, w: &[T], rows_w: usize, off: usize, n: usize) -> Vec<T> {
    // x [L, K] times w[off..off+n, :]^T
    let (l, k) = (x.dim(0), x.dim(1));
    debug_assert!(off + n <= rows_w);
    let mut out = vec![T::zero(); l * n];
    T::gemm(
        l,
        k,
        n,
        T::one(),
        x.data(),
        k,
        1,
        &w[off * k..],
        1,
        k,
        T::zero(),
        &mut out,
        n,
        1,
    );
    out
}

/// `(delta [L,D], B [L,N], C [L,N])` for an input sequence `u [L,D]`.
pub fn selective_params<T: Real>(
    u: &Tensor<T>,
    p: &S6Params<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (d, n, r) = (p.d_inner(), p.n_state(), p.rank());
    if u.rank() != 2
        || u.dim(1) != d
        || p.x_proj.shape() != [r + 2 * n, d]
        || p.dt_proj_bias.shape() != [d]
    {
        return shape_err(format!(
            "selective_params: u {:?} vs x_proj {:?} (D={d}, N={n}, R={r})",
            u.shape(),
            p.x_proj.shape()
        ));
    }
    let l = u.dim(0);
    let rows = r + 2 * n;
    let low = Tensor::new(vec![l, r], matmul_t(u, p.x_proj.data(), rows, 0, r))?;
    let b = Tensor::new(vec![l, n], matmul_t(u, p.x_proj.data(), rows, r, n))?;
    let c = Tensor::new(vec![l, n], matmul_t(u, p.x_proj.data(), rows, r + n, n))?;
    let mut delta = matmul_t(&low, p.dt_proj_weight.data(), d, 0, d);
    for row in delta.chunks_mut(d) {
        for (v, bias) in row.iter_mut().zip(p.dt_proj_bias.data()) {
            *v = softplus(*v + *bias);
        }
    }
    Ok((Tensor::new(vec![l, d], delta)?, b, c))
}

/// selective_params, then discretize, then scan from the zero state.
pub fn s6_forward<T: Real>(
    u: &Tensor<T>,
    p: &S6Params<T>,
    strategy: ScanStrategy,
) -> Result<Tensor<T>> {
    let (delta, b, c) = selective_params(u, p)?;
    let (abar, bbar) = discretize(&p.a(), &b, &delta)?;
    Ok(ssm_scan(&abar, &bbar, &c, u, None, strategy)?.0)
}

/// Inverse of softplus, for placing initial step sizes.
fn inv_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Selective SSM whose weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct S6 {
    pub cfg: S6Config,
    pub a_log: ParamId,
    pub x_proj: ParamId,
    pub dt_proj_weight: ParamId,
    pub dt_proj_bias: ParamId,
}

impl S6 {
    pub fn new<T: Real>(
        prefix: &str,
        cfg: S6Config,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (d, n, r) = (cfg.d_inner, cfg.n_state, cfg.rank());
        let a_log: Vec<f64> = (0..d)
            .flat_map(|_| (1..=n).map(|k| (k as f64).ln()))
            .collect();
        let a_log = store.add(
            format!("{prefix}.a_log"),
            Tensor::from_f64(vec![d, n], &a_log)?,
        )?;
        let x_proj = store.add_uniform(
            format!("{prefix}.x_proj.weight"),
            vec![r + 2 * n, d],
            1.0 / (d as f64).sqrt(),
            rng,
        )?;
        let dt_proj_weight = store.add_uniform(
            format!("{prefix}.dt_proj.weight"),
            vec![d, r],
            1.0 / (r as f64).sqrt(),
            rng,
        )?;
        let (lo, hi) = (cfg.dt_min.ln(), cfg.dt_max.ln());
        let unit = Uniform::new(0.0, 1.0);
        let bias: Vec<f64> = (0..d)
            .map(|_| inv_softplus((lo + unit.sample(rng) * (hi - lo)).exp().max(1e-4)))
            .collect();
        let dt_proj_bias = store.add(
            format!("{prefix}.dt_proj.bias"),
            Tensor::from_f64(vec![d], &bias)?,
        )?;
        Ok(Self {
            cfg,
            a_log,
            x_proj,
            dt_proj_weight,
            dt_proj_bias,
        })
    }

    pub fn weights<T: Real>(&self, store: &ParamStore<T>) -> S6Params<T> {
        S6Params {
            a_log: store.get(self.a_log).value.clone(),
            x_proj: store.get(self.x_proj).value.clone(),
            dt_proj_weight: store.get(self.dt_proj_weight).value.clone(),
            dt_proj_bias: store.get(self.dt_proj_bias).value.clone(),
        }
    }

    /// Differentiable forward over `u [S, L, D]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, u: Var) -> Result<Var> {
        let (n, r) = (self.cfg.n_state, self.cfg.rank());
        let xp = g.param(store, self.x_proj);
        let proj = g.dense(u, xp, None)?;
        let low = g.slice(proj, 2, 0, r)?;
        let b = g.slice(proj, 2, r, r + n)?;
        let c = g.slice(proj, 2, r + n, r + 2 * n)?;
        let dw = g.param(store, self.dt_proj_weight);
        let db = g.param(store, self.dt_proj_bias);
        let pre = g.dense(low, dw, Some(db))?;
        let delta = g.softplus(pre)?;
        let a_log = g.param(store, self.a_log);
        let e = g.exp(a_log)?;
        let a = g.scale(e, -1.0)?;
        g.selective_scan(u, delta, a, b, c, self.cfg.strategy)
    }
}
