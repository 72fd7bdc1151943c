//! Synthetic free-field microphone-array mixtures.

pub mod manifest;
mod source;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use manifest::{
    build_manifest, generate_dataset, generate_item, generate_items, load_item, load_split,
    save_item, Manifest, ManifestEntry, SimConfig, SourceFamily, Split,
};
pub use source::{gen_source, SourceKind};

pub const SPEED_OF_SOUND: f64 = 343.0;
pub const SOURCE_PEAK: f64 = 0.5;
/// Half-width in samples of the fractional-delay interpolator.
pub const FRAC_DELAY_HALF: usize = 32;
const MIN_PLANE_DISTANCE: f64 = 0.1;

/// Channels (0-based) of the rectangular preset used for an `m`-mic run.
pub fn standard_subset(m: usize) -> Option<Vec<usize>> {
    Some(match m {
        1 => vec![4],
        2 => vec![3, 4],
        3 => vec![3, 4, 5],
        4 => vec![0, 3, 4, 5],
        5 => vec![0, 1, 3, 4, 5],
        6 => vec![0, 1, 2, 3, 4, 5],
        _ => return None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub id: String,
    pub mic_positions: Vec<[f64; 3]>,
    pub reference_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl ArrayGeometry {
    /// Six mics on a 0.20 m x 0.10 m rectangle: top row 0..3, bottom row 3..6.
    pub fn rect6() -> Self {
        let mut mic_positions = Vec::new();
        for y in [0.05, -0.05] {
            for x in [-0.1, 0.0, 0.1] {
                mic_positions.push([x, y, 0.0]);
            }
        }
        Self {
            id: "rect6".into(),
            mic_positions,
            reference_index: 4,
            note: Some(
                "stand-in layout: rectangular 6-mic array, true device geometry unspecified".into(),
            ),
        }
    }

    pub fn single(position: [f64; 3]) -> Self {
        Self {
            id: "single".into(),
            mic_positions: vec![position],
            reference_index: 0,
            note: None,
        }
    }

    pub fn n_mics(&self) -> usize {
        self.mic_positions.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mic_positions.is_empty() {
            return Err(Error::Config("array needs at least one microphone".into()));
        }
        if self.reference_index >= self.n_mics() {
            return Err(Error::Config(format!(
                "reference index {} out of range for {} mics",
                self.reference_index,
                self.n_mics()
            )));
        }
        for i in 0..self.n_mics() {
            for j in 0..i {
                if dist(&self.mic_positions[i], &self.mic_positions[j]) < 1e-9 {
                    return Err(Error::Config(format!("mics {j} and {i} coincide")));
                }
            }
        }
        Ok(())
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.mic_positions {
            for k in 0..3 {
                c[k] += p[k] / self.n_mics() as f64;
            }
        }
        c
    }

    /// Unit normal of the plane holding every mic, if the mics span exactly a plane.
    pub fn plane_normal(&self) -> Option<[f64; 3]> {
        let p = &self.mic_positions;
        let origin = p.first()?;
        let mut normal = None;
        'outer: for i in 1..p.len() {
            for j in i + 1..p.len() {
                let n = cross(&sub(&p[i], origin), &sub(&p[j], origin));
                let len = norm(&n);
                if len > 1e-9 {
                    normal = Some([n[0] / len, n[1] / len, n[2] / len]);
                    break 'outer;
                }
            }
        }
        let n = normal?;
        p.iter()
            .all(|q| dot(&sub(q, origin), &n).abs() < 1e-9)
            .then_some(n)
    }
}

fn sub(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: &[f64; 3]) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    norm(&sub(a, b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    White,
    Pink,
    Babble,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Reference-channel SNR; `None` means no noise.
    pub snr_db: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub source_kind: String,
    pub noise_kind: NoiseKind,
    pub seed: u64,
    pub geometry_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry_note: Option<String>,
    pub source_position: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureItem {
    pub id: String,
    pub noisy: Vec<Vec<f64>>,
    pub clean_ref: Vec<f64>,
    pub snr_db: Option<f64>,
    pub reference_index: usize,
    pub sample_rate: u32,
    pub meta: ItemMeta,
}

impl MixtureItem {
    pub fn n_mics(&self) -> usize {
        self.noisy.len()
    }

    pub fn len(&self) -> usize {
        self.clean_ref.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean_ref.is_empty()
    }

    pub fn noisy_ref(&self) -> &[f64] {
        &self.noisy[self.reference_index]
    }

    /// Keeps `channels` in the given order; the reference must be among them.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Self> {
        let pos = channels
            .iter()
            .position(|&c| c == self.reference_index)
            .ok_or_else(|| {
                Error::Config(format!(
                    "channel subset {channels:?} drops reference {}",
                    self.reference_index
                ))
            })?;
        let noisy = channels
            .iter()
            .map(|&c| {
                self.noisy.get(c).cloned().ok_or_else(|| {
                    Error::Config(format!(
                        "channel {c} out of range for {} mics",
                        self.n_mics()
                    ))
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            noisy,
            reference_index: pos,
            ..self.clone()
        })
    }

    /// The item as seen by an `m`-mic model: unchanged if it already has `m`
    /// channels, else the standard subset of a six-channel recording.
    pub fn for_mics(&self, m: usize) -> Result<Self> {
        if self.n_mics() == m {
            return Ok(self.clone());
        }
        match standard_subset(m) {
            Some(sub) if self.n_mics() == 6 && self.reference_index == 4 => {
                self.select_channels(&sub)
            }
            _ => Err(Error::Config(format!(
                "no channel mapping from a {}-mic item to a {m}-mic model",
                self.n_mics()
            ))),
        }
    }

    /// Window `[start, start + len)` of every channel and the reference.
    pub fn crop(&self, start: usize, len: usize) -> Self {
        let end = (start + len).min(self.len());
        let start = start.min(end);
        Self {
            noisy: self.noisy.iter().map(|c| c[start..end].to_vec()).collect(),
            clean_ref: self.clean_ref[start..end].to_vec(),
            ..self.clone()
        }
    }
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Delays `x` by `delay` samples (≥ 0) and scales by `gain`, keeping the length.
pub fn fractional_delay(x: &[f64], delay: f64, gain: f64) -> Vec<f64> {
    let whole = delay.floor();
    let frac = delay - whole;
    let whole = whole as usize;
    let n = x.len();
    let mut out = vec![0.0; n];
    if frac < 1e-12 {
        for i in whole..n {
            out[i] = gain * x[i - whole];
        }
        return out;
    }
    let h = FRAC_DELAY_HALF as isize;
    // taps for x[m - whole - k], k in [-h+1, h]: sinc(k - frac) under a Blackman window
    let taps: Vec<f64> = (-h + 1..=h)
        .map(|k| {
            let t = k as f64 - frac;
            let s = if t.abs() < 1e-12 {
                1.0
            } else {
                (std::f64::consts::PI * t).sin() / (std::f64::consts::PI * t)
            };
            let u = (t + h as f64) / (2 * h) as f64;
            let w = 0.42 - 0.5 * (2.0 * std::f64::consts::PI * u).cos()
                + 0.08 * (4.0 * std::f64::consts::PI * u).cos();
            s * w
        })
        .collect();
    for (m, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (tap, k) in taps.iter().zip(-h + 1..=h) {
            let j = m as isize - whole as isize - k;
            if j >= 0 && (j as usize) < n {
                acc += tap * x[j as usize];
            }
        }
        *o = gain * acc;
    }
    out
}

fn white(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn pink(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    if n < 2 {
        return white(n, rng);
    }
    let mut planner = RealFftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut buf = white(n, rng);
    let mut spec = fwd.make_output_vec();
    fwd.process(&mut buf, &mut spec).expect("fft sizes match");
    spec[0] = Default::default();
    for (k, c) in spec.iter_mut().enumerate().skip(1) {
        *c /= (k as f64).sqrt();
    }
    // the inverse needs real-valued edge bins
    if n % 2 == 0 {
        let last = spec.len() - 1;
        spec[last].im = 0.0;
    }
    inv.process(&mut spec, &mut buf).expect("fft sizes match");
    buf
}

fn babble(n: usize, sample_rate: u32, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let mut out = vec![0.0; n];
    for _ in 0..4 {
        let f0 = rng.gen_range(90.0..260.0);
        let s = gen_source(
            &SourceKind::HarmonicAm { f0 },
            n as f64 / sample_rate as f64,
            sample_rate,
            rng.gen(),
        )?;
        for (o, v) in out.iter_mut().zip(s) {
            *o += v;
        }
    }
    Ok(out)
}

/// Noise for every channel: independent per channel, one shared slow envelope.
fn channel_noise(
    kind: NoiseKind,
    m: usize,
    n: usize,
    sample_rate: u32,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f64>>> {
    let rate = rng.gen_range(0.3..1.0);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let env: Vec<f64> = (0..n)
        .map(|i| {
            1.0 + 0.3 * (std::f64::consts::TAU * rate * i as f64 / sample_rate as f64 + phase).sin()
        })
        .collect();
    (0..m)
        .map(|_| {
            let base = match kind {
                NoiseKind::White => white(n, rng),
                NoiseKind::Pink => pink(n, rng),
                NoiseKind::Babble => babble(n, sample_rate, rng)?,
            };
            Ok(base.iter().zip(&env).map(|(a, e)| a * e).collect())
        })
        .collect()
}

/// Places `src` at `src_position`, propagates it to each mic and adds noise
/// calibrated on the reference channel.
pub fn simulate_array(
    src: &[f64],
    geom: &ArrayGeometry,
    src_position: [f64; 3],
    noise: &NoiseSpec,
    sample_rate: u32,
    seed: u64,
) -> Result<MixtureItem> {
    geom.validate()?;
    if let Some(normal) = geom.plane_normal() {
        let off = dot(&sub(&src_position, &geom.mic_positions[0]), &normal).abs();
        if off < MIN_PLANE_DISTANCE {
            return Err(Error::Domain(format!(
                "source is {off:.3} m from the array plane, need at least {MIN_PLANE_DISTANCE} m"
            )));
        }
    }
    let dists: Vec<f64> = geom
        .mic_positions
        .iter()
        .map(|p| dist(p, &src_position))
        .collect();
    let dmin = dists.iter().copied().fold(f64::INFINITY, f64::min);
    let clean: Vec<Vec<f64>> = dists
        .iter()
        .map(|&d| {
            let delay = (d - dmin) / SPEED_OF_SOUND * sample_rate as f64;
            let gain = dmin.max(1e-6) / d.max(1e-6);
            fractional_delay(src, delay, gain)
        })
        .collect();
    let r = geom.reference_index;
    let clean_ref = clean[r].clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy = match noise.snr_db {
        None => clean,
        Some(snr) => {
            let e_src = energy(&clean_ref);
            if e_src <= 0.0 {
                return Err(Error::Domain(
                    "cannot set an SNR for a zero-energy source".into(),
                ));
            }
            let n = channel_noise(noise.kind, geom.n_mics(), src.len(), sample_rate, &mut rng)?;
            let e_noise = energy(&n[r]);
            if e_noise <= 0.0 {
                return Err(Error::Degenerate("generated noise has zero energy".into()));
            }
            let scale = (e_src / (e_noise * 10f64.powf(snr / 10.0))).sqrt();
            clean
                .iter()
                .zip(&n)
                .map(|(c, nz)| c.iter().zip(nz).map(|(a, b)| a + scale * b).collect())
                .collect()
        }
    };
    Ok(MixtureItem {
        id: format!("mix-{seed}"),
        noisy,
        clean_ref,
        snr_db: noise.snr_db,
        reference_index: r,
        sample_rate,
        meta: ItemMeta {
            source_kind: String::new(),
            noise_kind: noise.kind,
            seed,
            geometry_id: geom.id.clone(),
            geometry_note: geom.note.clone(),
            source_position: src_position,
        },
    })
}
