use std::f64::consts::{PI, TAU};
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::SOURCE_PEAK;
use crate::dsp::wav::read_wav;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceKind {
    /// Harmonic series on `f0` under a syllable-rate amplitude envelope.
    HarmonicAm {
        f0: f64,
    },
    /// Band-passed noise switched on and off in bursts.
    FilteredNoiseBurst,
    WavFile {
        path: PathBuf,
    },
}

impl SourceKind {
    pub fn name(&self) -> String {
        match self {
            Self::HarmonicAm { f0 } => format!("harmonic_am(f0={f0:.1})"),
            Self::FilteredNoiseBurst => "filtered_noise_burst".into(),
            Self::WavFile { path } => format!("wav_file({})", path.display()),
        }
    }
}

/// Smooth on/off gate: bursts of `on` seconds separated by `off` seconds.
fn gate(n: usize, sr: f64, on: (f64, f64), off: (f64, f64), rng: &mut impl Rng) -> Vec<f64> {
    let ramp = (0.01 * sr).max(1.0);
    let mut g = vec![0.0; n];
    let mut t = ((rng.gen_range(0.0..off.1) * sr) as usize).min(n / 5);
    while t < n {
        let len = (rng.gen_range(on.0..on.1) * sr) as usize;
        let end = (t + len).min(n);
        for (i, v) in g[t..end].iter_mut().enumerate() {
            let edge = (i as f64).min((end - t - 1 - i) as f64);
            *v = (edge / ramp).min(1.0);
        }
        t = end + (rng.gen_range(off.0..off.1) * sr) as usize;
    }
    g
}

fn peak_normalize(x: &mut [f64]) {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v *= SOURCE_PEAK / peak);
    }
}

fn harmonic_am(f0: f64, n: usize, sr: f64, rng: &mut impl Rng) -> Vec<f64> {
    let n_harm = ((0.45 * sr / f0) as usize).clamp(1, 30);
    let phases: Vec<f64> = (0..n_harm).map(|_| rng.gen_range(0.0..TAU)).collect();
    let rate = rng.gen_range(3.0..5.0);
    let psi = rng.gen_range(0.0..PI);
    let g = gate(n, sr, (0.3, 0.8), (0.05, 0.2), rng);
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let syl = 0.3 + 0.7 * (PI * rate * t + psi).sin().powi(2);
            let s: f64 = phases
                .iter()
                .enumerate()
                .map(|(k, ph)| (TAU * (k + 1) as f64 * f0 * t + ph).sin() / (k + 1) as f64)
                .sum();
            s * syl * g[i]
        })
        .collect()
}

fn noise_burst(n: usize, sr: f64, rng: &mut impl Rng) -> Vec<f64> {
    let fc = (rng.gen_range(300f64.ln()..3000f64.ln())).exp();
    let q = 1.5;
    // constant-peak-gain band-pass biquad
    let w0 = TAU * fc / sr;
    let alpha = w0.sin() / (2.0 * q);
    let a0 = 1.0 + alpha;
    let (b0, b2) = (alpha / a0, -alpha / a0);
    let (a1, a2) = (-2.0 * w0.cos() / a0, (1.0 - alpha) / a0);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    let g = gate(n, sr, (0.1, 0.4), (0.05, 0.3), rng);
    (0..n)
        .map(|i| {
            let x: f64 = StandardNormal.sample(rng);
            let y = b0 * x + b2 * x2 - a1 * y1 - a2 * y2;
            x2 = x1;
            x1 = x;
            y2 = y1;
            y1 = y;
            y * g[i]
        })
        .collect()
}

/// Deterministic mono source of `duration` seconds, peak-normalized.
pub fn gen_source(
    kind: &SourceKind,
    duration: f64,
    sample_rate: u32,
    seed: u64,
) -> Result<Vec<f64>> {
    if !(duration > 0.0) || sample_rate == 0 {
        return Err(Error::Config(format!(
            "source needs positive duration and rate, got {duration} s at {sample_rate} Hz"
        )));
    }
    let sr = sample_rate as f64;
    let n = (duration * sr).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = match kind {
        SourceKind::HarmonicAm { f0 } => {
            if !(*f0 > 0.0 && *f0 < sr / 2.0) {
                return Err(Error::Config(format!(
                    "f0 {f0} Hz outside (0, {}) Hz",
                    sr / 2.0
                )));
            }
            harmonic_am(*f0, n, sr, &mut rng)
        }
        SourceKind::FilteredNoiseBurst => noise_burst(n, sr, &mut rng),
        SourceKind::WavFile { path } => {
            let wave = read_wav(path)?;
            if wave.sample_rate != sample_rate {
                return Err(Error::Config(format!(
                    "{} is sampled at {} Hz, expected {sample_rate} Hz",
                    path.display(),
                    wave.sample_rate
                )));
            }
            let len = wave.len();
            let mono: Vec<f64> = (0..len)
                .map(|i| wave.channels.iter().map(|c| c[i]).sum::<f64>() / wave.n_channels() as f64)
                .collect();
            let start = if len > n {
                rng.gen_range(0..=len - n)
            } else {
                0
            };
            let mut out = mono[start..(start + n).min(len)].to_vec();
            out.resize(n, 0.0);
            out
        }
    };
    peak_normalize(&mut x);
    Ok(x)
}
