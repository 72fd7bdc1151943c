//! Objective scores: SI-SDR, SDR and STOI, plus split-level evaluation.

pub mod resample;
pub mod stoi;

use rayon::prelude::*;
use serde::Serialize;

use crate::dsp::{SpectroPair, StftConfig};
use crate::error::{Error, Result};
use crate::network::Model;
use crate::sim::MixtureItem;
use crate::tensor::Real;

pub use stoi::stoi;

/// Upper bound reported when the residual vanishes.
pub const DB_CAP: f64 = 100.0;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_pair(reference: &[f64], est: &[f64]) -> Result<f64> {
    if reference.len() != est.len() {
        return Err(Error::Shape(format!(
            "reference has {} samples, estimate {}",
            reference.len(),
            est.len()
        )));
    }
    let e = dot(reference, reference);
    if !(e > 0.0) {
        return Err(Error::Domain("reference has zero energy".into()));
    }
    Ok(e)
}

fn ratio_db(signal: f64, residual: f64) -> f64 {
    if residual <= signal * 1e-10 {
        return DB_CAP;
    }
    (10.0 * (signal / residual).log10()).clamp(-DB_CAP, DB_CAP)
}

/// Scale-invariant SDR in dB. Signals are used as given (no mean removal).
pub fn si_sdr(reference: &[f64], est: &[f64]) -> Result<f64> {
    let e_ref = check_pair(reference, est)?;
    let alpha = dot(est, reference) / e_ref;
    let target = alpha * alpha * e_ref;
    let residual: f64 = reference
        .iter()
        .zip(est)
        .map(|(r, e)| (e - alpha * r).powi(2))
        .sum();
    if target == 0.0 {
        return Ok(-DB_CAP);
    }
    Ok(ratio_db(target, residual))
}

/// Plain SNR of `est` against the unscaled reference, in dB.
pub fn sdr(reference: &[f64], est: &[f64]) -> Result<f64> {
    let e_ref = check_pair(reference, est)?;
    let residual: f64 = reference
        .iter()
        .zip(est)
        .map(|(r, e)| (e - r).powi(2))
        .sum();
    Ok(ratio_db(e_ref, residual))
}

/// Something that maps a multi-channel recording to one enhanced waveform.
pub trait Enhancer: Sync {
    fn name(&self) -> String;
    fn n_mics(&self) -> Option<usize>;
    fn enhance(&self, channels: &[Vec<f64>], reference_index: usize) -> Result<Vec<f64>>;
}

impl<T: Real> Enhancer for Model<T> {
    fn name(&self) -> String {
        format!("model ({} mics)", self.cfg().n_mics)
    }

    fn n_mics(&self) -> Option<usize> {
        Some(self.cfg().n_mics)
    }

    fn enhance(&self, channels: &[Vec<f64>], reference_index: usize) -> Result<Vec<f64>> {
        if reference_index != self.cfg().reference_mic {
            return Err(Error::Config(format!(
                "item reference channel {reference_index} differs from model reference {}",
                self.cfg().reference_mic
            )));
        }
        Model::enhance(self, channels)
    }
}

/// Unit mask and the noisy phase: analysis followed by resynthesis.
#[derive(Clone, Debug, Default)]
pub struct Passthrough {
    pub stft: StftConfig,
}

impl Enhancer for Passthrough {
    fn name(&self) -> String {
        "passthrough".into()
    }

    fn n_mics(&self) -> Option<usize> {
        None
    }

    fn enhance(&self, channels: &[Vec<f64>], reference_index: usize) -> Result<Vec<f64>> {
        let x = channels
            .get(reference_index)
            .ok_or_else(|| Error::Config(format!("no channel {reference_index}")))?;
        SpectroPair::analyze(x, &self.stft)?.synthesize(&self.stft, x.len())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Scores {
    pub si_sdr_db: f64,
    pub sdr_db: f64,
    /// `None` when the item is too short for STOI.
    pub stoi: Option<f64>,
}

pub fn score(reference: &[f64], est: &[f64], sample_rate: u32) -> Result<Scores> {
    let stoi = match stoi::stoi(reference, est, sample_rate) {
        Ok(v) => Some(v),
        Err(Error::InputTooShort { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(Scores {
        si_sdr_db: si_sdr(reference, est)?,
        sdr_db: sdr(reference, est)?,
        stoi,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ItemScores {
    pub id: String,
    pub noisy: Option<Scores>,
    pub enhanced: Option<Scores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Aggregate {
    pub si_sdr_db: f64,
    pub sdr_db: f64,
    pub stoi: Option<f64>,
    pub count: usize,
    pub stoi_count: usize,
}

impl Aggregate {
    fn of<'a>(scores: impl Iterator<Item = &'a Scores>) -> Self {
        let mut a = Self::default();
        let mut stoi_sum = 0.0;
        for s in scores {
            a.si_sdr_db += s.si_sdr_db;
            a.sdr_db += s.sdr_db;
            a.count += 1;
            if let Some(v) = s.stoi {
                stoi_sum += v;
                a.stoi_count += 1;
            }
        }
        if a.count > 0 {
            a.si_sdr_db /= a.count as f64;
            a.sdr_db /= a.count as f64;
        }
        if a.stoi_count > 0 {
            a.stoi = Some(stoi_sum / a.stoi_count as f64);
        }
        a
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub enhancer: String,
    pub items: Vec<ItemScores>,
    pub noisy: Aggregate,
    pub enhanced: Aggregate,
    pub failures: usize,
}

const PESQ_CELL: &str = "n/a (out of scope)";
pub const SDR_NOTE: &str =
    "SDR is plain SNR against the unscaled reference, not a filtered-projection BSS-Eval SDR.";

impl MetricReport {
    /// Mean SI-SDR gain of enhanced over noisy on the successfully scored items.
    pub fn si_sdr_improvement(&self) -> f64 {
        self.enhanced.si_sdr_db - self.noisy.si_sdr_db
    }

    pub fn table(&self) -> String {
        let fmt_stoi = |a: &Aggregate| a.stoi.map_or("n/a".to_string(), |v| format!("{v:.3}"));
        let mut out = String::new();
        out.push_str(&format!(
            "# {} ({} items, {} failed)\n",
            self.enhancer,
            self.items.len(),
            self.failures
        ));
        out.push_str(&format!("# {SDR_NOTE}\n"));
        out.push_str(&format!(
            "{:<10} {:>20} {:>20} {:>20} {:>7} {:>8} {:>8}\n",
            "", "PESQ (N-1)", "PESQ (N-2)", "PESQ (W)", "STOI", "SI-SDR", "SDR"
        ));
        for (label, a) in [("Noisy", &self.noisy), ("Enhanced", &self.enhanced)] {
            out.push_str(&format!(
                "{:<10} {:>20} {:>20} {:>20} {:>7} {:>8.2} {:>8.2}\n",
                label,
                PESQ_CELL,
                PESQ_CELL,
                PESQ_CELL,
                fmt_stoi(a),
                a.si_sdr_db,
                a.sdr_db
            ));
        }
        if self.failures > 0 {
            out.push_str(&format!(
                "warning: {} item(s) failed and are excluded from the means\n",
                self.failures
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn score_item(enhancer: &dyn Enhancer, item: &MixtureItem) -> Result<(Scores, Scores)> {
    let item = match enhancer.n_mics() {
        Some(m) => item.for_mics(m)?,
        None => item.clone(),
    };
    let noisy = score(&item.clean_ref, item.noisy_ref(), item.sample_rate)?;
    let est = enhancer.enhance(&item.noisy, item.reference_index)?;
    if est.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("enhanced waveform is not finite".into()));
    }
    let enhanced = score(&item.clean_ref, &est, item.sample_rate)?;
    Ok((noisy, enhanced))
}

/// Enhances and scores every item; failures are recorded per item and
/// left out of the aggregates.
pub fn evaluate(enhancer: &dyn Enhancer, items: &[MixtureItem]) -> Result<MetricReport> {
    if items.is_empty() {
        return Err(Error::Config("nothing to evaluate: empty item list".into()));
    }
    let per_item: Vec<ItemScores> = items
        .par_iter()
        .map(|item| match score_item(enhancer, item) {
            Ok((n, e)) => ItemScores {
                id: item.id.clone(),
                noisy: Some(n),
                enhanced: Some(e),
                error: None,
            },
            Err(e) => {
                log::warn!("item {}: {e}", item.id);
                ItemScores {
                    id: item.id.clone(),
                    noisy: None,
                    enhanced: None,
                    error: Some(e.to_string()),
                }
            }
        })
        .collect();
    let ok: Vec<&ItemScores> = per_item.iter().filter(|s| s.error.is_none()).collect();
    Ok(MetricReport {
        enhancer: enhancer.name(),
        noisy: Aggregate::of(ok.iter().filter_map(|s| s.noisy.as_ref())),
        enhanced: Aggregate::of(ok.iter().filter_map(|s| s.enhanced.as_ref())),
        failures: per_item.len() - ok.len(),
        items: per_item,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_sample_example() {
        assert!((si_sdr(&[1.0, 0.0], &[1.0, 0.1]).unwrap() - 20.0).abs() < 1e-9);
        assert!((sdr(&[1.0, 0.0], &[1.0, 0.1]).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn caps_and_errors() {
        let r = [0.3, -0.2, 0.5];
        assert_eq!(si_sdr(&r, &[0.6, -0.4, 1.0]).unwrap(), DB_CAP);
        assert_eq!(sdr(&r, &r).unwrap(), DB_CAP);
        assert!(matches!(si_sdr(&[0.0; 3], &r), Err(Error::Domain(_))));
        assert!(matches!(sdr(&r, &r[..2]), Err(Error::Shape(_))));
        assert_eq!(si_sdr(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), -DB_CAP);
    }

    #[test]
    fn table_has_pesq_placeholders() {
        let s = Scores {
            si_sdr_db: 1.0,
            sdr_db: 2.0,
            stoi: Some(0.5),
        };
        let rep = MetricReport {
            enhancer: "x".into(),
            items: vec![],
            noisy: Aggregate::of([s.clone()].iter()),
            enhanced: Aggregate::of([s].iter()),
            failures: 0,
        };
        let t = rep.table();
        assert!(t.contains("n/a (out of scope)"));
        assert!(t.contains("Noisy") && t.contains("Enhanced"));
        assert!(t.contains("plain SNR"));
    }
}
