//! Signal-domain generator losses.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::network::OutputVars;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub mag: f64,
    pub phase: f64,
    pub complex: f64,
    pub time: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mag: 1.0,
            phase: 0.3,
            complex: 0.1,
            time: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.mag, self.phase, self.complex, self.time];
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Clean targets for one item.
#[derive(Clone, Debug)]
pub struct LossTargets<T: Real> {
    /// `[T, F]` compressed magnitude.
    pub cmag: Tensor<T>,
    /// `[T, F]` phase.
    pub pha: Tensor<T>,
    pub wave: Tensor<T>,
}

/// Loss values; `total` is the weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub mag: f64,
    pub phase: f64,
    pub complex: f64,
    pub time: f64,
    pub total: f64,
}

impl LossParts {
    pub fn is_finite(&self) -> bool {
        [self.mag, self.phase, self.complex, self.time, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn add_scaled(&mut self, other: &Self, s: f64) {
        self.mag += s * other.mag;
        self.phase += s * other.phase;
        self.complex += s * other.complex;
        self.time += s * other.time;
        self.total += s * other.total;
    }
}

/// `mean(1 - cos(d))`
fn anti_wrap<T: Real>(g: &mut Graph<T>, d: Var) -> Result<Var> {
    let c = g.cos(d)?;
    let one_minus = g.affine(c, -1.0, 1.0)?;
    g.mean(one_minus)
}

fn diff<T: Real>(g: &mut Graph<T>, x: Var, axis: usize) -> Result<Option<Var>> {
    let n = g.shape(x)[axis];
    if n < 2 {
        return Ok(None);
    }
    let hi = g.slice(x, axis, 1, n)?;
    let lo = g.slice(x, axis, 0, n - 1)?;
    Ok(Some(g.sub(hi, lo)?))
}

/// Mean of the instantaneous, group-delay (frequency difference) and
/// instantaneous-frequency (time difference) anti-wrapped phase errors.
/// A difference term over an axis of length 1 contributes zero.
pub fn phase_loss<T: Real>(g: &mut Graph<T>, est: Var, target: Var) -> Result<Var> {
    let d = g.sub(est, target)?;
    let mut terms = vec![anti_wrap(g, d)?];
    for axis in [1, 0] {
        if let Some(dd) = diff(g, d, axis)? {
            terms.push(anti_wrap(g, dd)?);
        }
    }
    let mut acc = terms[0];
    for t in &terms[1..] {
        acc = g.add(acc, *t)?;
    }
    g.scale(acc, 1.0 / 3.0)
}

pub struct LossVars {
    pub mag: Var,
    pub phase: Var,
    pub complex: Var,
    pub time: Var,
    pub total: Var,
}

impl LossVars {
    pub fn values<T: Real>(&self, g: &Graph<T>) -> LossParts {
        let v = |x: Var| g.value(x).item().f64();
        LossParts {
            mag: v(self.mag),
            phase: v(self.phase),
            complex: v(self.complex),
            time: v(self.time),
            total: v(self.total),
        }
    }
}

/// Builds every loss component and the weighted total. Components with zero
/// weight are still evaluated but left out of the total.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    out: &OutputVars,
    targets: &LossTargets<T>,
    weights: &LossWeights,
    stft: &StftConfig,
) -> Result<LossVars> {
    let tc = g.constant(targets.cmag.clone());
    let tp = g.constant(targets.pha.clone());
    if g.shape(out.y_cmag) != targets.cmag.shape() || targets.pha.shape() != targets.cmag.shape() {
        return Err(Error::Shape(format!(
            "loss: output {:?} vs target {:?}/{:?}",
            g.shape(out.y_cmag),
            targets.cmag.shape(),
            targets.pha.shape()
        )));
    }
    let mag = g.mse(out.y_cmag, tc)?;
    let phase = phase_loss(g, out.y_pha, tp)?;

    let cos_e = g.cos(out.y_pha)?;
    let sin_e = g.sin(out.y_pha)?;
    let re_e = g.mul(out.y_cmag, cos_e)?;
    let im_e = g.mul(out.y_cmag, sin_e)?;
    let re_t = g.constant(targets.cmag.zip_map(&targets.pha, |m, p| m * p.cos()));
    let im_t = g.constant(targets.cmag.zip_map(&targets.pha, |m, p| m * p.sin()));
    let l_re = g.mse(re_e, re_t)?;
    let l_im = g.mse(im_e, im_t)?;
    let complex = g.add(l_re, l_im)?;

    let lin = g.pow(out.y_cmag, 1.0 / stft.compression)?;
    let re = g.mul(lin, cos_e)?;
    let im = g.mul(lin, sin_e)?;
    let wave = g.istft(re, im, stft, targets.wave.numel())?;
    let tw = g.constant(targets.wave.clone());
    let err = g.sub(wave, tw)?;
    let abs = g.abs(err)?;
    let time = g.mean(abs)?;

    let mut total: Option<Var> = None;
    for (w, v) in [
        (weights.mag, mag),
        (weights.phase, phase),
        (weights.complex, complex),
        (weights.time, time),
    ] {
        if w == 0.0 {
            continue;
        }
        let term = if w == 1.0 { v } else { g.scale(v, w)? };
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.scale(mag, 0.0)?,
    };
    Ok(LossVars {
        mag,
        phase,
        complex,
        time,
        total,
    })
}
