//! The gradient verification suite: every catalog operator in isolation,
//! then composite subgraphs up to a toy-sized generator with the full loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::autodiff::{Conv2dAttrs, ConvTranspose2dAttrs, Graph, OpKind, ParamStore, Var};
use crate::dsp::{SpectroPair, StftConfig};
use crate::error::Result;
use crate::mamba::{MambaUnit, MambaUnitConfig, TfBlock, TfBlockConfig};
use crate::network::{Generator, ModelConfig};
use crate::ssm::{S6Config, ScanStrategy, S6};
use crate::tensor::Tensor;
use crate::trainer::{total_loss, LossTargets, LossWeights};

type Builder = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var> + Send + Sync>;

pub struct Case {
    pub name: String,
    /// Operator kinds this case exists to cover.
    pub covers: Vec<OpKind>,
    pub store: ParamStore<f64>,
    pub build: Builder,
}

impl Case {
    /// Same case with the backward pass of `kind` deliberately corrupted.
    pub fn with_fault(self, kind: OpKind) -> Case {
        let inner = self.build;
        Case {
            name: format!("{} [fault: {kind}]", self.name),
            covers: self.covers,
            store: self.store,
            build: Box::new(move |g, s| {
                g.inject_backward_fault(kind);
                inner(g, s)
            }),
        }
    }
}

struct Inputs {
    rng: ChaCha8Rng,
    store: ParamStore<f64>,
}

impl Inputs {
    fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            store: ParamStore::new(),
        }
    }

    fn fill(&mut self, shape: &[usize], f: impl Fn(&mut ChaCha8Rng) -> f64) -> Vec<f64> {
        let n: usize = shape.iter().product();
        (0..n).map(|_| f(&mut self.rng)).collect()
    }

    /// Parameter with entries in `[-1, 1]`.
    fn param(&mut self, name: &str, shape: &[usize]) -> Var0 {
        let v = self.fill(shape, |r| r.gen_range(-1.0..1.0));
        self.param_with(name, shape, v)
    }

    /// Parameter with entries of magnitude in `[lo, hi]` and random sign.
    fn param_away(&mut self, name: &str, shape: &[usize], lo: f64, hi: f64) -> Var0 {
        let v = self.fill(shape, |r| {
            let m = r.gen_range(lo..hi);
            if r.gen_bool(0.5) {
                m
            } else {
                -m
            }
        });
        self.param_with(name, shape, v)
    }

    fn param_range(&mut self, name: &str, shape: &[usize], lo: f64, hi: f64) -> Var0 {
        let v = self.fill(shape, |r| r.gen_range(lo..hi));
        self.param_with(name, shape, v)
    }

    fn param_with(&mut self, name: &str, shape: &[usize], v: Vec<f64>) -> Var0 {
        let id = self
            .store
            .add(
                name,
                Tensor::new(shape.to_vec(), v).expect("shape matches data"),
            )
            .expect("unique case names");
        Var0(id)
    }

    fn tensor(&mut self, shape: &[usize]) -> Tensor<f64> {
        let v = self.fill(shape, |r| r.gen_range(-1.0..1.0));
        Tensor::new(shape.to_vec(), v).expect("shape matches data")
    }
}

#[derive(Clone, Copy)]
struct Var0(crate::autodiff::ParamId);

impl Var0 {
    fn get(self, g: &mut Graph<f64>, s: &ParamStore<f64>) -> Var {
        g.param(s, self.0)
    }
}

/// `sum(y * r)` for a fixed random cotangent `r`.
fn project(g: &mut Graph<f64>, y: Var, r: &Tensor<f64>) -> Result<Var> {
    let rv = g.constant(r.clone());
    let p = g.mul(y, rv)?;
    g.sum(p)
}

fn case(
    name: &str,
    covers: &[OpKind],
    seed: u64,
    out_shape: &[usize],
    setup: impl FnOnce(&mut Inputs) -> Vec<Var0>,
    body: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Send + Sync + 'static,
) -> Case {
    let mut inp = Inputs::new(seed);
    let ids = setup(&mut inp);
    let r = inp.tensor(out_shape);
    Case {
        name: name.to_string(),
        covers: covers.to_vec(),
        store: inp.store,
        build: Box::new(move |g, s| {
            let vars: Vec<Var> = ids.iter().map(|v| v.get(g, s)).collect();
            let y = body(g, &vars)?;
            project(g, y, &r)
        }),
    }
}

fn tiny_stft() -> StftConfig {
    StftConfig {
        window_len: 16,
        hop: 4,
        fft_len: 16,
        ..Default::default()
    }
}

/// One case per catalog operator (`Leaf` excluded).
pub fn catalog_cases(seed: u64) -> Vec<Case> {
    use OpKind as K;
    let unary =
        |name: &str, kind: OpKind, lo: f64, hi: f64, f: fn(&mut Graph<f64>, Var) -> Result<Var>| {
            case(
                name,
                &[kind],
                seed,
                &[3, 4],
                move |i| vec![i.param_away("x", &[3, 4], lo, hi)],
                move |g, v| f(g, v[0]),
            )
        };
    vec![
        case(
            "conv2d",
            &[K::Conv2d],
            seed,
            &[3, 4, 3],
            |i| {
                vec![
                    i.param("x", &[2, 4, 5]),
                    i.param("w", &[3, 2, 3, 3]),
                    i.param("b", &[3]),
                ]
            },
            |g, v| {
                let attrs = Conv2dAttrs {
                    stride: (1, 2),
                    padding: (2, 1),
                    dilation: (2, 1),
                };
                g.conv2d(v[0], v[1], Some(v[2]), attrs)
            },
        ),
        case(
            "conv_transpose2d",
            &[K::ConvTranspose2d],
            seed,
            &[2, 4, 6],
            |i| {
                vec![
                    i.param("x", &[3, 4, 3]),
                    i.param("w", &[3, 2, 1, 3]),
                    i.param("b", &[2]),
                ]
            },
            |g, v| {
                let attrs = ConvTranspose2dAttrs {
                    stride: (1, 2),
                    padding: (0, 1),
                    output_padding: (0, 1),
                };
                g.conv_transpose2d(v[0], v[1], Some(v[2]), attrs)
            },
        ),
        case(
            "depthwise_conv1d",
            &[K::DepthwiseConv1d],
            seed,
            &[2, 6, 3],
            |i| {
                vec![
                    i.param("x", &[2, 6, 3]),
                    i.param("w", &[3, 4]),
                    i.param("b", &[3]),
                ]
            },
            |g, v| g.depthwise_conv1d(v[0], v[1], Some(v[2])),
        ),
        case(
            "conv_transpose1d",
            &[K::ConvTranspose1d],
            seed,
            &[2, 6, 3],
            |i| {
                vec![
                    i.param("x", &[2, 6, 4]),
                    i.param("w", &[4, 3, 4]),
                    i.param("b", &[3]),
                ]
            },
            |g, v| g.conv_transpose1d(v[0], v[1], Some(v[2]), 1, 2),
        ),
        case(
            "dense",
            &[K::Dense],
            seed,
            &[2, 3, 5],
            |i| {
                vec![
                    i.param("x", &[2, 3, 4]),
                    i.param("w", &[5, 4]),
                    i.param("b", &[5]),
                ]
            },
            |g, v| g.dense(v[0], v[1], Some(v[2])),
        ),
        case(
            "instance_norm",
            &[K::InstanceNorm],
            seed,
            &[3, 4, 5],
            |i| {
                vec![
                    i.param("x", &[3, 4, 5]),
                    i.param("gamma", &[3]),
                    i.param("beta", &[3]),
                ]
            },
            |g, v| g.instance_norm(v[0], v[1], v[2], 1e-5),
        ),
        case(
            "rms_norm",
            &[K::RmsNorm],
            seed,
            &[2, 3, 5],
            |i| vec![i.param("x", &[2, 3, 5]), i.param("w", &[5])],
            |g, v| g.rms_norm(v[0], v[1], 1e-5),
        ),
        case(
            "prelu",
            &[K::PRelu],
            seed,
            &[3, 4, 5],
            |i| {
                vec![
                    i.param_away("x", &[3, 4, 5], 0.1, 1.0),
                    i.param("slope", &[3]),
                ]
            },
            |g, v| g.prelu(v[0], v[1]),
        ),
        unary("silu", K::Silu, 0.0, 2.0, |g, x| g.silu(x)),
        unary("sigmoid", K::Sigmoid, 0.0, 3.0, |g, x| g.sigmoid(x)),
        unary("softplus", K::Softplus, 0.0, 3.0, |g, x| g.softplus(x)),
        unary("exp", K::Exp, 0.0, 1.5, |g, x| g.exp(x)),
        unary("cos", K::Cos, 0.0, 3.0, |g, x| g.cos(x)),
        unary("sin", K::Sin, 0.0, 3.0, |g, x| g.sin(x)),
        unary("abs", K::Abs, 0.1, 2.0, |g, x| g.abs(x)),
        case(
            "pow",
            &[K::Pow],
            seed,
            &[3, 4],
            |i| vec![i.param_range("x", &[3, 4], 0.2, 2.0)],
            |g, v| g.pow(v[0], 1.0 / 0.3),
        ),
        unary("affine", K::Affine, 0.0, 2.0, |g, x| g.affine(x, 1.7, -0.3)),
        case(
            "atan2",
            &[K::Atan2],
            seed,
            &[3, 4],
            |i| {
                vec![
                    i.param_away("y", &[3, 4], 0.2, 1.0),
                    i.param_away("x", &[3, 4], 0.2, 1.0),
                ]
            },
            |g, v| g.atan2(v[0], v[1]),
        ),
        case(
            "add",
            &[K::Add],
            seed,
            &[3, 4],
            |i| vec![i.param("a", &[3, 4]), i.param("b", &[4])],
            |g, v| g.add(v[0], v[1]),
        ),
        case(
            "sub",
            &[K::Sub],
            seed,
            &[3, 4],
            |i| vec![i.param("a", &[3, 4]), i.param("b", &[3, 1])],
            |g, v| g.sub(v[0], v[1]),
        ),
        case(
            "mul",
            &[K::Mul],
            seed,
            &[3, 4],
            |i| vec![i.param("a", &[3, 4]), i.param("b", &[4])],
            |g, v| g.mul(v[0], v[1]),
        ),
        case(
            "concat",
            &[K::Concat],
            seed,
            &[2, 5],
            |i| vec![i.param("a", &[2, 3]), i.param("b", &[2, 2])],
            |g, v| g.concat(&[v[0], v[1]], 1),
        ),
        case(
            "flip",
            &[K::Flip],
            seed,
            &[2, 3, 4],
            |i| vec![i.param("x", &[2, 3, 4])],
            |g, v| g.flip(v[0], 1),
        ),
        case(
            "slice",
            &[K::Slice],
            seed,
            &[2, 2, 4],
            |i| vec![i.param("x", &[2, 3, 4])],
            |g, v| g.slice(v[0], 1, 1, 3),
        ),
        case(
            "reshape",
            &[K::Reshape],
            seed,
            &[4, 6],
            |i| vec![i.param("x", &[2, 3, 4])],
            |g, v| g.reshape(v[0], vec![4, 6]),
        ),
        case(
            "permute",
            &[K::Permute],
            seed,
            &[4, 2, 3],
            |i| vec![i.param("x", &[2, 3, 4])],
            |g, v| g.permute(v[0], vec![2, 0, 1]),
        ),
        case(
            "mean",
            &[K::Mean],
            seed,
            &[],
            |i| vec![i.param("x", &[3, 4])],
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.mean(sq)
            },
        ),
        case(
            "sum",
            &[K::Sum],
            seed,
            &[],
            |i| vec![i.param("x", &[3, 4])],
            |g, v| {
                let s = g.sin(v[0])?;
                g.sum(s)
            },
        ),
        case(
            "batched_matmul",
            &[K::BatchedMatmul],
            seed,
            &[2, 3, 5],
            |i| vec![i.param("a", &[2, 3, 4]), i.param("b", &[2, 4, 5])],
            |g, v| g.batched_matmul(v[0], v[1]),
        ),
        case(
            "selective_scan",
            &[K::SelectiveScan],
            seed,
            &[2, 6, 4],
            |i| {
                vec![
                    i.param("u", &[2, 6, 4]),
                    i.param_range("delta", &[2, 6, 4], 0.05, 0.6),
                    i.param_range("a", &[4, 2], -2.0, -0.2),
                    i.param("b", &[2, 6, 2]),
                    i.param("c", &[2, 6, 2]),
                ]
            },
            |g, v| g.selective_scan(v[0], v[1], v[2], v[3], v[4], ScanStrategy::Sequential),
        ),
        case(
            "istft",
            &[K::Istft],
            seed,
            &[28],
            |i| vec![i.param("re", &[8, 9]), i.param("im", &[8, 9])],
            |g, v| g.istft(v[0], v[1], &tiny_stft(), 28),
        ),
    ]
}

fn store_case(
    name: &str,
    store: ParamStore<f64>,
    build: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var> + Send + Sync + 'static,
) -> Case {
    Case {
        name: name.to_string(),
        covers: Vec::new(),
        store,
        build: Box::new(build),
    }
}

pub fn toy_model_config(n_mics: usize) -> ModelConfig {
    ModelConfig {
        c_mid: 4,
        n_tf_blocks: 1,
        densenet_depth: 2,
        densenet_dilations: vec![1, 2],
        n_state: 2,
        stft: tiny_stft(),
        ..ModelConfig::desk(n_mics)
    }
}

/// Selective SSM, Mamba unit, TF block, dense encoder and the toy generator
/// under the full training loss.
pub fn composite_cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rand_t = |shape: &[usize], rng: &mut ChaCha8Rng| -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .expect("shape")
    };
    let mut cases = Vec::new();

    let mut store = ParamStore::new();
    let s6 = S6::new(
        "s6",
        S6Config {
            d_inner: 4,
            n_state: 2,
            strategy: ScanStrategy::Sequential,
            ..Default::default()
        },
        &mut store,
        &mut rng,
    )?;
    let (u, r) = (rand_t(&[2, 6, 4], &mut rng), rand_t(&[2, 6, 4], &mut rng));
    cases.push(store_case(
        "s6 (d_inner=4, N=2, L=6)",
        store,
        move |g, s| {
            let x = g.constant(u.clone());
            let y = s6.forward(g, s, x)?;
            project(g, y, &r)
        },
    ));

    let unit_cfg = MambaUnitConfig {
        d_model: 4,
        n_state: 2,
        strategy: ScanStrategy::Sequential,
        ..Default::default()
    };
    let mut store = ParamStore::new();
    let unit = MambaUnit::new("unit", unit_cfg.clone(), &mut store, &mut rng)?;
    let (u, r) = (rand_t(&[2, 6, 4], &mut rng), rand_t(&[2, 6, 4], &mut rng));
    cases.push(store_case(
        "mamba unit (d_model=4, L=6)",
        store,
        move |g, s| {
            let x = g.constant(u.clone());
            let y = unit.forward(g, s, x)?;
            project(g, y, &r)
        },
    ));

    let mut store = ParamStore::new();
    let blk = TfBlock::new(
        "tf",
        TfBlockConfig {
            unit: unit_cfg,
            ..Default::default()
        },
        &mut store,
        &mut rng,
    )?;
    let (u, r) = (rand_t(&[4, 5, 3], &mut rng), rand_t(&[4, 5, 3], &mut rng));
    cases.push(store_case(
        "tf block (C=4, N=2, T=5, F=3)",
        store,
        move |g, s| {
            let x = g.constant(u.clone());
            let y = blk.forward(g, s, x)?;
            project(g, y, &r)
        },
    ));

    let cfg = toy_model_config(2);
    let mut store = ParamStore::new();
    let net = Generator::new(cfg.clone(), &mut store, &mut rng)?;
    let enc_net = net.clone();
    let feats = {
        let mut f = rand_t(&[4, 8, 9], &mut rng);
        // magnitudes non-negative, phases in radians
        for (k, v) in f.data_mut().iter_mut().enumerate() {
            if (k / 72) % 2 == 0 {
                *v = v.abs();
            } else {
                *v *= 3.0;
            }
        }
        f
    };
    let r = rand_t(&[4, 8, 5], &mut rng);
    let f2 = feats.clone();
    cases.push(store_case(
        "dense encoder (M=2, T=8, F=9)",
        store.clone(),
        move |g, s| {
            let x = g.constant(f2.clone());
            let h = enc_net.input_proj(g, s, x)?;
            let y = enc_net.dense_encoder(g, s, h)?;
            project(g, y, &r)
        },
    ));

    let n = 28;
    let clean: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let pair = SpectroPair::analyze(&clean, &cfg.stft)?;
    let targets = LossTargets {
        cmag: pair.cmag,
        pha: pair.pha,
        wave: Tensor::from_f64(vec![n], &clean)?,
    };
    let x_ref = Tensor::new(vec![8, 9], feats.data()[..72].to_vec())?;
    cases.push(store_case(
        "toy generator + total loss (T=8, F=9)",
        store,
        move |g, s| {
            let f = g.constant(feats.clone());
            let xr = g.constant(x_ref.clone());
            let out = net.forward(g, s, f, xr)?;
            Ok(total_loss(g, &out, &targets, &LossWeights::default(), &cfg.stft)?.total)
        },
    ));
    Ok(cases)
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub reports: Vec<GradCheckReport>,
    pub passed: bool,
}

impl SuiteReport {
    pub fn max_rel_error(&self) -> f64 {
        self.reports
            .iter()
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&GradCheckReport> {
        self.reports.iter().filter(|r| !r.passed).collect()
    }
}

pub fn run_cases(cases: Vec<Case>, cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    cases
        .into_iter()
        .map(|mut c| grad_check(&c.name, &mut c.store, &c.build, cfg))
        .collect()
}

/// Catalog cases for each of `catalog_seeds`, then the composites once.
pub fn run_suite(catalog_seeds: &[u64], cfg: &GradCheckConfig) -> Result<SuiteReport> {
    let mut reports = Vec::new();
    for &seed in catalog_seeds {
        for mut r in run_cases(catalog_cases(seed), cfg)? {
            r.name = format!("{} (seed {seed})", r.name);
            reports.push(r);
        }
    }
    reports.extend(run_cases(composite_cases(cfg.seed)?, cfg)?);
    let passed = reports.iter().all(|r| r.passed);
    Ok(SuiteReport { reports, passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_covers_every_operator() {
        let cases = catalog_cases(0);
        for kind in OpKind::ALL.iter().filter(|k| **k != OpKind::Leaf) {
            assert!(
                cases.iter().any(|c| c.covers.contains(kind)),
                "no gradient case for {kind}"
            );
        }
    }

    #[test]
    fn suite_passes() {
        let rep = run_suite(&[0], &GradCheckConfig::default()).unwrap();
        let bad: Vec<_> = rep
            .failures()
            .iter()
            .map(|r| (r.name.clone(), r.max_rel_error, r.worst_param.clone()))
            .collect();
        assert!(rep.passed, "{bad:?}");
    }

    #[test]
    fn fault_in_generator_is_localized() {
        let case = composite_cases(0)
            .unwrap()
            .pop()
            .unwrap()
            .with_fault(OpKind::SelectiveScan);
        let rep = run_cases(vec![case], &GradCheckConfig::default()).unwrap();
        assert!(!rep[0].passed);
        assert_eq!(rep[0].failing_op.as_deref(), Some("selective_scan"));
    }
}
