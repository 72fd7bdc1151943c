//! Gated Mamba unit, its bidirectional wrapper, and the time/frequency block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::ssm::{S6Config, ScanStrategy, S6};
use crate::tensor::{Real, Tensor};

const RMS_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MambaUnitConfig {
    pub d_model: usize,
    pub expand: usize,
    pub d_conv: usize,
    pub n_state: usize,
    pub strategy: ScanStrategy,
    /// RMS-normalize the unit input (learnable gain) before the in-projection.
    pub pre_norm: bool,
}

impl Default for MambaUnitConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            expand: 2,
            d_conv: 4,
            n_state: 16,
            strategy: ScanStrategy::default(),
            pre_norm: true,
        }
    }
}

impl MambaUnitConfig {
    pub fn d_inner(&self) -> usize {
        self.expand * self.d_model
    }

    fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.expand == 0 || self.d_conv == 0 || self.n_state == 0 {
            return Err(Error::Config(format!(
                "mamba unit sizes must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TfBlockConfig {
    pub unit: MambaUnitConfig,
    pub tconv_kernel: usize,
    /// Reuse the forward unit's weights for the reversed direction.
    pub shared_directions: bool,
}

impl Default for TfBlockConfig {
    fn default() -> Self {
        Self {
            unit: MambaUnitConfig::default(),
            tconv_kernel: 4,
            shared_directions: false,
        }
    }
}

fn bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

/// Optional RMS norm, in-proj, causal depthwise conv, SiLU, selective SSM,
/// SiLU gate, out-proj.
#[derive(Clone, Debug)]
pub struct MambaUnit {
    pub cfg: MambaUnitConfig,
    pub norm_weight: Option<ParamId>,
    pub in_proj_weight: ParamId,
    pub in_proj_bias: ParamId,
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
    pub s6: S6,
    pub out_proj_weight: ParamId,
    pub out_proj_bias: ParamId,
}

impl MambaUnit {
    pub fn new<T: Real>(
        prefix: &str,
        cfg: MambaUnitConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let (dm, di, k) = (cfg.d_model, cfg.d_inner(), cfg.d_conv);
        let norm_weight = if cfg.pre_norm {
            Some(store.add(
                format!("{prefix}.norm.weight"),
                Tensor::full(vec![dm], T::one()),
            )?)
        } else {
            None
        };
        let in_proj_weight = store.add_uniform(
            format!("{prefix}.in_proj.weight"),
            vec![2 * di, dm],
            bound(dm),
            rng,
        )?;
        let in_proj_bias = store.add_uniform(
            format!("{prefix}.in_proj.bias"),
            vec![2 * di],
            bound(dm),
            rng,
        )?;
        let conv_weight = store.add_uniform(
            format!("{prefix}.conv1d.weight"),
            vec![di, k],
            bound(k),
            rng,
        )?;
        let conv_bias =
            store.add_uniform(format!("{prefix}.conv1d.bias"), vec![di], bound(k), rng)?;
        let s6_cfg = S6Config {
            d_inner: di,
            n_state: cfg.n_state,
            strategy: cfg.strategy,
            ..Default::default()
        };
        let s6 = S6::new(&format!("{prefix}.s6"), s6_cfg, store, rng)?;
        let out_proj_weight = store.add_uniform(
            format!("{prefix}.out_proj.weight"),
            vec![dm, di],
            bound(di),
            rng,
        )?;
        let out_proj_bias =
            store.add_uniform(format!("{prefix}.out_proj.bias"), vec![dm], bound(di), rng)?;
        Ok(Self {
            cfg,
            norm_weight,
            in_proj_weight,
            in_proj_bias,
            conv_weight,
            conv_bias,
            s6,
            out_proj_weight,
            out_proj_bias,
        })
    }

    /// `x [S, L, d_model] -> [S, L, d_model]`
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 3 || shape[2] != self.cfg.d_model {
            return Err(Error::Shape(format!(
                "mamba unit expects [S,L,{}], got {shape:?}",
                self.cfg.d_model
            )));
        }
        let di = self.cfg.d_inner();
        let x = match self.norm_weight {
            Some(id) => {
                let nw = g.param(store, id);
                g.rms_norm(x, nw, RMS_EPS)?
            }
            None => x,
        };
        let w = g.param(store, self.in_proj_weight);
        let b = g.param(store, self.in_proj_bias);
        let xz = g.dense(x, w, Some(b))?;
        let h = g.slice(xz, 2, 0, di)?;
        let z = g.slice(xz, 2, di, 2 * di)?;
        let cw = g.param(store, self.conv_weight);
        let cb = g.param(store, self.conv_bias);
        let h = g.depthwise_conv1d(h, cw, Some(cb))?;
        let h = g.silu(h)?;
        let y = self.s6.forward(g, store, h)?;
        let gate = g.silu(z)?;
        let y = g.mul(y, gate)?;
        let w = g.param(store, self.out_proj_weight);
        let b = g.param(store, self.out_proj_bias);
        g.dense(y, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct BiMamba {
    pub fwd: MambaUnit,
    /// `None` when both directions share `fwd`.
    pub bwd: Option<MambaUnit>,
}

impl BiMamba {
    pub fn new<T: Real>(
        prefix: &str,
        cfg: MambaUnitConfig,
        shared: bool,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fwd = MambaUnit::new(&format!("{prefix}.fwd"), cfg.clone(), store, rng)?;
        let bwd = if shared {
            None
        } else {
            Some(MambaUnit::new(&format!("{prefix}.bwd"), cfg, store, rng)?)
        };
        Ok(Self { fwd, bwd })
    }

    /// `x [S, L, C] -> [S, L, 2C]`: forward half then re-reversed backward half.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let f = self.fwd.forward(g, store, x)?;
        let xr = g.flip(x, 1)?;
        let b = self
            .bwd
            .as_ref()
            .unwrap_or(&self.fwd)
            .forward(g, store, xr)?;
        let b = g.flip(b, 1)?;
        g.concat(&[f, b], 2)
    }
}

/// One directional pass of a TF block: bidirectional Mamba, then a
/// length-preserving transposed conv merging `2C -> C`.
#[derive(Clone, Debug)]
pub struct SeqPass {
    pub bi: BiMamba,
    pub tconv_weight: ParamId,
    pub tconv_bias: ParamId,
    pub kernel: usize,
}

impl SeqPass {
    fn new<T: Real>(
        prefix: &str,
        cfg: &TfBlockConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let c = cfg.unit.d_model;
        let k = cfg.tconv_kernel;
        if k == 0 {
            return Err(Error::Config("tconv_kernel must be positive".into()));
        }
        let bi = BiMamba::new(prefix, cfg.unit.clone(), cfg.shared_directions, store, rng)?;
        let tconv_weight = store.add_uniform(
            format!("{prefix}.tconv.weight"),
            vec![2 * c, c, k],
            bound(c * k),
            rng,
        )?;
        let tconv_bias =
            store.add_uniform(format!("{prefix}.tconv.bias"), vec![c], bound(c * k), rng)?;
        Ok(Self {
            bi,
            tconv_weight,
            tconv_bias,
            kernel: k,
        })
    }

    /// `x [S, L, C] -> [S, L, C]`
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.bi.forward(g, store, x)?;
        let w = g.param(store, self.tconv_weight);
        let b = g.param(store, self.tconv_bias);
        let crop = self.kernel - 1;
        g.conv_transpose1d(y, w, Some(b), crop / 2, crop - crop / 2)
    }
}

/// Time pass over `F'` sequences of length `T`, then frequency pass over `T`
/// sequences of length `F'`, each with a residual connection.
#[derive(Clone, Debug)]
pub struct TfBlock {
    pub cfg: TfBlockConfig,
    pub time: SeqPass,
    pub freq: SeqPass,
}

impl TfBlock {
    pub fn new<T: Real>(
        prefix: &str,
        cfg: TfBlockConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let time = SeqPass::new(&format!("{prefix}.time"), &cfg, store, rng)?;
        let freq = SeqPass::new(&format!("{prefix}.freq"), &cfg, store, rng)?;
        Ok(Self { cfg, time, freq })
    }

    /// `x [C, T, F'] -> [C, T, F']`
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 3 || shape[0] != self.cfg.unit.d_model {
            return Err(Error::Shape(format!(
                "tf block expects [{},T,F], got {shape:?}",
                self.cfg.unit.d_model
            )));
        }
        let xt = g.permute(x, vec![2, 1, 0])?;
        let yt = self.time.forward(g, store, xt)?;
        let yt = g.permute(yt, vec![2, 1, 0])?;
        let x = g.add(x, yt)?;
        let xf = g.permute(x, vec![1, 2, 0])?;
        let yf = self.freq.forward(g, store, xf)?;
        let yf = g.permute(yf, vec![2, 0, 1])?;
        g.add(x, yf)
    }
}
