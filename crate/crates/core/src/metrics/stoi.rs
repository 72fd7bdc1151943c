//! Short-time objective intelligibility.

use realfft::RealFftPlanner;

use super::resample::Resampler;
use crate::error::{Error, Result};

pub const FS: u32 = 10_000;
pub const FRAME: usize = 256;
pub const HOP: usize = 128;
pub const NFFT: usize = 512;
pub const N_BANDS: usize = 15;
pub const MIN_FREQ: f64 = 150.0;
pub const SEGMENT: usize = 30;
pub const BETA_DB: f64 = -15.0;
pub const DYN_RANGE_DB: f64 = 40.0;
const EPS: f64 = f64::EPSILON;

/// Hann window of `n` points without the zero endpoints.
fn hanning_inner(n: usize) -> Vec<f64> {
    let m = n + 2;
    (1..=n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (m - 1) as f64).cos())
        .collect()
}

fn frame_starts(len: usize) -> impl Iterator<Item = usize> {
    (0..len.saturating_sub(FRAME)).step_by(HOP)
}

fn overlap_add(frames: &[Vec<f64>]) -> Vec<f64> {
    if frames.is_empty() {
        return Vec::new();
    }
    let mut out = vec![0.0; (frames.len() - 1) * HOP + FRAME];
    for (i, f) in frames.iter().enumerate() {
        for (o, v) in out[i * HOP..].iter_mut().zip(f) {
            *o += v;
        }
    }
    out
}

/// Drops frames whose reference energy is more than `DYN_RANGE_DB` below the
/// loudest reference frame, then overlap-adds what remains.
pub fn remove_silent_frames(x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let w = hanning_inner(FRAME);
    let window = |s: &[f64], i: usize| -> Vec<f64> {
        w.iter().zip(&s[i..i + FRAME]).map(|(a, b)| a * b).collect()
    };
    let xf: Vec<Vec<f64>> = frame_starts(x.len()).map(|i| window(x, i)).collect();
    let yf: Vec<Vec<f64>> = frame_starts(x.len()).map(|i| window(y, i)).collect();
    let energy: Vec<f64> = xf
        .iter()
        .map(|f| 20.0 * (f.iter().map(|v| v * v).sum::<f64>().sqrt() + EPS).log10())
        .collect();
    let top = energy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let keep: Vec<bool> = energy
        .iter()
        .map(|e| top - DYN_RANGE_DB - e < 0.0)
        .collect();
    let pick = |fs: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        fs.into_iter()
            .zip(&keep)
            .filter(|(_, k)| **k)
            .map(|(f, _)| f)
            .collect()
    };
    (overlap_add(&pick(xf)), overlap_add(&pick(yf)))
}

/// One-third-octave band matrix `[N_BANDS][NFFT/2 + 1]` as `(lo, hi)` bin ranges.
pub fn third_octave_bands() -> Vec<(usize, usize)> {
    let n_bins = NFFT / 2 + 1;
    let f: Vec<f64> = (0..n_bins)
        .map(|k| k as f64 * FS as f64 / NFFT as f64)
        .collect();
    let nearest = |target: f64| -> usize {
        let mut best = 0;
        for (i, v) in f.iter().enumerate() {
            if (v - target).powi(2) < (f[best] - target).powi(2) {
                best = i;
            }
        }
        best
    };
    (0..N_BANDS)
        .map(|k| {
            let k = k as f64;
            let lo = MIN_FREQ * 2f64.powf((2.0 * k - 1.0) / 6.0);
            let hi = MIN_FREQ * 2f64.powf((2.0 * k + 1.0) / 6.0);
            (nearest(lo), nearest(hi))
        })
        .collect()
}

/// Band envelopes `[N_BANDS][frames]`.
fn band_envelopes(x: &[f64], bands: &[(usize, usize)]) -> Vec<Vec<f64>> {
    let w = hanning_inner(FRAME);
    let fft = RealFftPlanner::<f64>::new().plan_fft_forward(NFFT);
    let mut buf = fft.make_input_vec();
    let mut spec = fft.make_output_vec();
    let starts: Vec<usize> = frame_starts(x.len()).collect();
    let mut out = vec![vec![0.0; starts.len()]; bands.len()];
    for (t, &s) in starts.iter().enumerate() {
        buf.iter_mut().for_each(|v| *v = 0.0);
        for (i, (b, wv)) in buf.iter_mut().zip(&w).enumerate() {
            *b = wv * x[s + i];
        }
        fft.process(&mut buf, &mut spec)
            .expect("fft buffer sizes are fixed");
        for (band, &(lo, hi)) in out.iter_mut().zip(bands) {
            band[t] = spec[lo..hi]
                .iter()
                .map(|c| c.norm_sqr())
                .sum::<f64>()
                .sqrt();
        }
    }
    out
}

fn normalize(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|a| *a -= mean);
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt() + EPS;
    v.iter_mut().for_each(|a| *a /= n);
}

/// STOI of `est` against `reference`, both sampled at `fs`.
pub fn stoi(reference: &[f64], est: &[f64], fs: u32) -> Result<f64> {
    if reference.len() != est.len() {
        return Err(Error::Shape(format!(
            "stoi: lengths differ ({} vs {})",
            reference.len(),
            est.len()
        )));
    }
    let needed = (fs as usize).div_ceil(2);
    if reference.len() < needed {
        return Err(Error::InputTooShort {
            needed,
            got: reference.len(),
        });
    }
    let (x, y) = if fs == FS {
        (reference.to_vec(), est.to_vec())
    } else {
        let r = Resampler::new(fs, FS)?;
        (r.process(reference), r.process(est))
    };
    let (x, y) = remove_silent_frames(&x, &y);
    let bands = third_octave_bands();
    let xb = band_envelopes(&x, &bands);
    let yb = band_envelopes(&y, &bands);
    let frames = xb[0].len();
    if frames < SEGMENT {
        return Err(Error::InputTooShort {
            needed: SEGMENT,
            got: frames,
        });
    }
    let clip = 10f64.powf(-BETA_DB / 20.0);
    let mut total = 0.0;
    let mut count = 0usize;
    for m in SEGMENT..=frames {
        for (xband, yband) in xb.iter().zip(&yb) {
            let mut xs = xband[m - SEGMENT..m].to_vec();
            let ys = &yband[m - SEGMENT..m];
            let nx = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = ys.iter().map(|v| v * v).sum::<f64>().sqrt();
            let k = nx / (ny + EPS);
            let mut yp: Vec<f64> = ys
                .iter()
                .zip(&xs)
                .map(|(yv, xv)| (yv * k).min(xv * (1.0 + clip)))
                .collect();
            normalize(&mut yp);
            normalize(&mut xs);
            total += yp.iter().zip(&xs).map(|(a, b)| a * b).sum::<f64>();
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_edges_are_bins() {
        let b = third_octave_bands();
        assert_eq!(b.len(), 15);
        // 150·2^(-1/6) ≈ 133.6 Hz lands on bin 7 (136.7 Hz)
        assert_eq!(b[0], (7, 9));
        assert!(b.windows(2).all(|w| w[0].1 == w[1].0));
        assert_eq!(b[14], (174, 219));
    }

    #[test]
    fn hann_inner_is_symmetric_and_nonzero() {
        let w = hanning_inner(FRAME);
        assert!(w.iter().all(|v| *v > 0.0));
        for i in 0..FRAME {
            assert!((w[i] - w[FRAME - 1 - i]).abs() < 1e-12);
        }
    }

    #[test]
    fn silence_is_removed() {
        let n = 10_000;
        let x: Vec<f64> = (0..n)
            .map(|i| {
                if i < n / 2 {
                    (i as f64 * 0.3).sin()
                } else {
                    0.0
                }
            })
            .collect();
        let (xs, _) = remove_silent_frames(&x, &x);
        assert!(xs.len() < n / 2 + 2 * FRAME);
        assert!(xs.len() > n / 2 - 2 * FRAME);
    }

    #[test]
    fn all_silent_tail_short_input_errors() {
        let mut x = vec![0.0; 16000];
        for (i, v) in x.iter_mut().take(600).enumerate() {
            *v = (i as f64 * 0.2).sin();
        }
        assert!(matches!(
            stoi(&x, &x, 16000),
            Err(Error::InputTooShort { .. })
        ));
    }
}
