//! Rational-ratio polyphase resampling with a Kaiser-windowed sinc.

use crate::error::{Error, Result};

pub const TAPS_PER_PHASE: usize = 64;
const KAISER_BETA: f64 = 5.0;

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Polyphase resampler from `from` Hz to `to` Hz.
#[derive(Clone, Debug)]
pub struct Resampler {
    up: usize,
    down: usize,
    /// Prototype low-pass at the upsampled rate, `TAPS_PER_PHASE * up + 1` taps.
    h: Vec<f64>,
}

impl Resampler {
    pub fn new(from: u32, to: u32) -> Result<Self> {
        if from == 0 || to == 0 {
            return Err(Error::Config("sample rates must be positive".into()));
        }
        let g = gcd(from as usize, to as usize);
        let (up, down) = (to as usize / g, from as usize / g);
        // odd length keeps the group delay on the sample grid
        let n = TAPS_PER_PHASE * up + 1;
        let center = (n - 1) as f64 / 2.0;
        let cutoff = 1.0 / up.max(down) as f64;
        let norm = bessel_i0(KAISER_BETA);
        let h = (0..n)
            .map(|k| {
                let t = k as f64 - center;
                let r = 2.0 * t / (n - 1).max(1) as f64;
                let w = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / norm;
                up as f64 * cutoff * sinc(cutoff * t) * w
            })
            .collect();
        Ok(Self { up, down, h })
    }

    pub fn ratio(&self) -> (usize, usize) {
        (self.up, self.down)
    }

    pub fn output_len(&self, len: usize) -> usize {
        (len * self.up).div_ceil(self.down)
    }

    pub fn process(&self, x: &[f64]) -> Vec<f64> {
        if self.up == 1 && self.down == 1 {
            return x.to_vec();
        }
        let n_out = self.output_len(x.len());
        let taps = self.h.len() as isize;
        let half = (taps - 1) / 2;
        let up = self.up as isize;
        (0..n_out)
            .map(|n| {
                // position on the upsampled grid, delay-compensated
                let pos = (n * self.down) as isize + half;
                // only k with (pos - k) divisible by `up` hit nonzero samples
                let k0 = pos.rem_euclid(up);
                let mut acc = 0.0;
                let mut k = k0;
                while k < taps {
                    let j = (pos - k) / up;
                    if j >= 0 && (j as usize) < x.len() {
                        acc += self.h[k as usize] * x[j as usize];
                    }
                    k += up;
                }
                acc
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn identity_ratio_is_copy() {
        let r = Resampler::new(16000, 16000).unwrap();
        assert_eq!(r.process(&[1.0, 2.0]), vec![1.0, 2.0]);
    }

    #[test]
    fn tone_survives_16k_to_10k() {
        let r = Resampler::new(16000, 10000).unwrap();
        assert_eq!(r.ratio(), (5, 8));
        let x: Vec<f64> = (0..16000)
            .map(|n| (2.0 * PI * 1000.0 * n as f64 / 16000.0).sin())
            .collect();
        let y = r.process(&x);
        assert_eq!(y.len(), 10000);
        let mut err: f64 = 0.0;
        for (n, v) in y.iter().enumerate().skip(200).take(9600) {
            let expect = (2.0 * PI * 1000.0 * n as f64 / 10000.0).sin();
            err = err.max((v - expect).abs());
        }
        assert!(err < 2e-3, "{err}");
    }

    #[test]
    fn above_nyquist_is_rejected() {
        let r = Resampler::new(16000, 10000).unwrap();
        let x: Vec<f64> = (0..16000)
            .map(|n| (2.0 * PI * 7000.0 * n as f64 / 16000.0).sin())
            .collect();
        let y = r.process(&x);
        let rms = (y[500..9500].iter().map(|v| v * v).sum::<f64>() / 9000.0).sqrt();
        assert!(rms < 0.01, "{rms}");
    }
}
