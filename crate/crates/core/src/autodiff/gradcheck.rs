//! Central finite-difference verification of reverse-mode gradients.
//!
//! A check rebuilds the subgraph for every perturbed parameter element, so
//! builders must be pure functions of the store. When a check fails, each
//! recorded node's vector-Jacobian product is tested in isolation to name
//! the operator responsible.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::ops::{self, Op, OpKind};
use super::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the denominator of the relative error.
    pub floor: f64,
    /// Elements checked per parameter; `None` checks every element.
    pub max_elems: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-5,
            max_elems: Some(24),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub failing_op: Option<String>,
    pub checked: usize,
    pub passed: bool,
}

pub fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares every parameter gradient of the scalar built by `build` against
/// central differences.
pub fn grad_check<F>(
    name: &str,
    store: &mut ParamStore<f64>,
    build: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if store.is_empty() {
        return Err(Error::Contract(format!(
            "grad_check `{name}` has no parameters"
        )));
    }
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    store.zero_grad();
    g.backward_into(loss, store)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h = cfg.step;
    let mut worst = (0.0f64, None::<String>);
    let mut checked = 0;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let numel = store.get(id).value.numel();
        let picks: Vec<usize> = match cfg.max_elems {
            Some(k) if k < numel => {
                let mut v = sample(&mut rng, numel, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..numel).collect(),
        };
        for i in picks {
            let analytic = store.get(id).grad.data()[i];
            let mut e = rel_error(analytic, central(store, &build, id, i, h)?, cfg.floor);
            if e > cfg.tolerance {
                // a PReLU or abs kink inside [x - h, x + h] spoils the
                // difference; a tenfold smaller step usually clears it
                let e2 = rel_error(
                    analytic,
                    central(store, &build, id, i, h / 10.0)?,
                    cfg.floor,
                );
                e = e.min(e2);
            }
            checked += 1;
            if e > worst.0 || !e.is_finite() {
                worst = (e, Some(format!("{}[{i}]", store.get(id).name)));
            }
        }
    }
    let passed = worst.0 <= cfg.tolerance;
    let failing_op = if passed {
        None
    } else {
        localize(&g, cfg, &mut rng)?.map(|k| k.name().to_string())
    };
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_error: worst.0,
        worst_param: worst.1,
        failing_op,
        checked,
        passed,
    })
}

fn central<F>(
    store: &mut ParamStore<f64>,
    build: &F,
    id: super::ParamId,
    i: usize,
    h: f64,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let orig = store.get(id).value.data()[i];
    store.get_mut(id).value.data_mut()[i] = orig + h;
    let lp = eval(store, build)?;
    store.get_mut(id).value.data_mut()[i] = orig - h;
    let lm = eval(store, build)?;
    store.get_mut(id).value.data_mut()[i] = orig;
    Ok((lp - lm) / (2.0 * h))
}

fn eval<F>(store: &ParamStore<f64>, build: &F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = build(&mut g, store)?;
    Ok(g.value(v).item())
}

/// Checks one operator's vector-Jacobian product on concrete inputs with a
/// random cotangent. Returns the maximum relative error over sampled entries.
pub fn check_vjp(
    op: &Op,
    inputs: &[&Tensor<f64>],
    need: &[bool],
    fault: bool,
    cfg: &GradCheckConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    let out = ops::forward(op, inputs)?;
    let v: Vec<f64> = (0..out.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let vt = Tensor::new(out.shape().to_vec(), v)?;
    let mut grads = ops::backward(op, inputs, &out, &vt, need)?;
    if fault {
        for t in grads.iter_mut().flatten() {
            t.data_mut().iter_mut().for_each(|x| *x *= 1.5);
        }
    }
    let h = cfg.step;
    let mut worst = 0.0f64;
    for (j, gj) in grads.iter().enumerate() {
        let Some(gj) = gj else { continue };
        let numel = inputs[j].numel();
        let picks: Vec<usize> = match cfg.max_elems {
            Some(k) if k < numel => sample(rng, numel, k).into_vec(),
            _ => (0..numel).collect(),
        };
        for i in picks {
            let mut perturbed: Vec<Tensor<f64>> = inputs.iter().map(|t| (*t).clone()).collect();
            let orig = perturbed[j].data()[i];
            perturbed[j].data_mut()[i] = orig + h;
            let fp = dot(
                &ops::forward(op, &perturbed.iter().collect::<Vec<_>>())?,
                &vt,
            );
            perturbed[j].data_mut()[i] = orig - h;
            let fm = dot(
                &ops::forward(op, &perturbed.iter().collect::<Vec<_>>())?,
                &vt,
            );
            let e = rel_error(gj.data()[i], (fp - fm) / (2.0 * h), cfg.floor);
            worst = worst.max(if e.is_finite() { e } else { f64::INFINITY });
        }
    }
    Ok(worst)
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// The operator kind whose isolated VJP check fails worst, if any.
fn localize(g: &Graph<f64>, cfg: &GradCheckConfig, rng: &mut impl Rng) -> Result<Option<OpKind>> {
    let mut worst: Option<(f64, OpKind)> = None;
    for node in &g.nodes {
        if node.inputs.is_empty() || !node.requires_grad {
            continue;
        }
        let vals: Vec<&Tensor<f64>> = node.inputs.iter().map(|v| &g.nodes[v.0].value).collect();
        let need: Vec<bool> = node
            .inputs
            .iter()
            .map(|v| g.nodes[v.0].requires_grad)
            .collect();
        let kind = node.op.kind();
        let e = check_vjp(&node.op, &vals, &need, g.fault == Some(kind), cfg, rng)?;
        if e > cfg.tolerance && worst.map_or(true, |(w, _)| e > w) {
            worst = Some((e, kind));
        }
    }
    Ok(worst.map(|(_, k)| k))
}
