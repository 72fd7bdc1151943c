//! STFT analysis/synthesis, power-law magnitude compression and the packed
//! multi-channel feature layout.

pub mod wav;

use std::cell::RefCell;
use std::f64::consts::PI;

use realfft::num_complex::Complex;
use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};

use crate::autodiff::ops::angle;
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

pub use wav::{read_wav, write_wav, WavFormat, Waveform};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    #[default]
    HannPeriodic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    pub fft_len: usize,
    pub window: WindowKind,
    pub sample_rate: u32,
    pub compression: f64,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_len: 400,
            hop: 100,
            fft_len: 400,
            window: WindowKind::HannPeriodic,
            sample_rate: 16_000,
            compression: 0.3,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_len < 2 || self.hop == 0 {
            return Err(Error::Config(format!(
                "window_len {} and hop {} must be positive",
                self.window_len, self.hop
            )));
        }
        if self.hop > self.window_len {
            return Err(Error::Config(format!(
                "hop {} exceeds window_len {}",
                self.hop, self.window_len
            )));
        }
        if self.fft_len < self.window_len {
            return Err(Error::Config(format!(
                "fft_len {} shorter than window_len {}",
                self.fft_len, self.window_len
            )));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(Error::Config(format!(
                "compression exponent {} outside (0, 1]",
                self.compression
            )));
        }
        Ok(())
    }

    pub fn n_freqs(&self) -> usize {
        self.fft_len / 2 + 1
    }

    pub fn pad(&self) -> usize {
        self.window_len / 2
    }

    /// Frame count for a signal of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        1 + (len + 2 * self.pad() - self.window_len) / self.hop
    }

    pub fn window(&self) -> Vec<f64> {
        match self.window {
            WindowKind::HannPeriodic => {
                let n = self.window_len as f64;
                (0..self.window_len)
                    .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos())
                    .collect()
            }
        }
    }

    fn offset(&self) -> usize {
        (self.fft_len - self.window_len) / 2
    }
}

/// One-sided complex spectrum, frames × bins.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub re: Tensor<f64>,
    pub im: Tensor<f64>,
}

impl Spectrum {
    pub fn n_frames(&self) -> usize {
        self.re.dim(0)
    }

    pub fn n_freqs(&self) -> usize {
        self.re.dim(1)
    }

    pub fn magnitude(&self) -> Tensor<f64> {
        self.re.zip_map(&self.im, |r, i| r.hypot(i))
    }

    pub fn phase(&self) -> Tensor<f64> {
        self.re.zip_map(&self.im, |r, i| angle(i, r))
    }

    pub fn from_polar(mag: &Tensor<f64>, pha: &Tensor<f64>) -> Result<Self> {
        if mag.shape() != pha.shape() || mag.rank() != 2 {
            return shape_err(format!(
                "magnitude {:?} and phase {:?} must share a [T,F] shape",
                mag.shape(),
                pha.shape()
            ));
        }
        Ok(Self {
            re: mag.zip_map(pha, |m, p| m * p.cos()),
            im: mag.zip_map(pha, |m, p| m * p.sin()),
        })
    }
}

thread_local! {
    static PLANNER: RefCell<RealFftPlanner<f64>> = RefCell::new(RealFftPlanner::new());
}

fn reflect_index(i: isize, len: usize) -> usize {
    // numpy "reflect": the edge sample is not repeated
    let n = len as isize;
    let period = 2 * (n - 1);
    let mut k = i.rem_euclid(period.max(1));
    if k >= n {
        k = period - k;
    }
    k as usize
}

pub fn stft(wave: &[f64], cfg: &StftConfig) -> Result<Spectrum> {
    cfg.validate()?;
    if wave.len() < cfg.window_len {
        return Err(Error::InputTooShort {
            needed: cfg.window_len,
            got: wave.len(),
        });
    }
    let pad = cfg.pad() as isize;
    let n_frames = cfg.n_frames(wave.len());
    let nf = cfg.n_freqs();
    let win = cfg.window();
    let off = cfg.offset();
    let fft = PLANNER.with(|p| p.borrow_mut().plan_fft_forward(cfg.fft_len));
    let mut buf = fft.make_input_vec();
    let mut spec = fft.make_output_vec();
    let mut scratch = fft.make_scratch_vec();
    let mut re = Vec::with_capacity(n_frames * nf);
    let mut im = Vec::with_capacity(n_frames * nf);
    for t in 0..n_frames {
        buf.iter_mut().for_each(|v| *v = 0.0);
        let start = (t * cfg.hop) as isize - pad;
        for (j, w) in win.iter().enumerate() {
            buf[off + j] = w * wave[reflect_index(start + j as isize, wave.len())];
        }
        fft.process_with_scratch(&mut buf, &mut spec, &mut scratch)
            .map_err(|e| Error::Degenerate(e.to_string()))?;
        re.extend(spec.iter().map(|c| c.re));
        im.extend(spec.iter().map(|c| c.im));
    }
    Ok(Spectrum {
        re: Tensor::new(vec![n_frames, nf], re)?,
        im: Tensor::new(vec![n_frames, nf], im)?,
    })
}

/// Overlap-added squared window in the padded domain, and the padded length.
fn window_norm(cfg: &StftConfig, n_frames: usize) -> Vec<f64> {
    let win = cfg.window();
    let total = (n_frames - 1) * cfg.hop + cfg.window_len;
    let mut norm = vec![0.0; total];
    for t in 0..n_frames {
        for (j, w) in win.iter().enumerate() {
            norm[t * cfg.hop + j] += w * w;
        }
    }
    norm
}

/// Samples `[0, out_len)` that fall inside the synthesized span, with their normalization.
fn checked_norm(cfg: &StftConfig, n_frames: usize, out_len: usize) -> Result<(Vec<f64>, usize)> {
    let norm = window_norm(cfg, n_frames);
    let pad = cfg.pad();
    let covered = out_len.min(norm.len().saturating_sub(pad));
    for n in 0..covered {
        if norm[n + pad] < 1e-10 {
            return Err(Error::Degenerate(format!(
                "overlap-add normalization vanishes at output sample {n}"
            )));
        }
    }
    Ok((norm, covered))
}

fn check_parts<T: Real>(re: &Tensor<T>, im: &Tensor<T>, cfg: &StftConfig) -> Result<usize> {
    if re.rank() != 2 || re.shape() != im.shape() || re.dim(1) != cfg.n_freqs() || re.dim(0) == 0 {
        return shape_err(format!(
            "istft expects re/im [T,{}], got {:?} and {:?}",
            cfg.n_freqs(),
            re.shape(),
            im.shape()
        ));
    }
    Ok(re.dim(0))
}

/// Inverse STFT by weighted overlap-add with squared-window normalization.
pub fn istft_parts<T: Real>(
    re: &Tensor<T>,
    im: &Tensor<T>,
    cfg: &StftConfig,
    out_len: usize,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let n_frames = check_parts(re, im, cfg)?;
    let nf = cfg.n_freqs();
    let (norm, covered) = checked_norm(cfg, n_frames, out_len)?;
    let win = cfg.window();
    let off = cfg.offset();
    let ifft = PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(cfg.fft_len));
    let mut spec = ifft.make_input_vec();
    let mut buf = ifft.make_output_vec();
    let mut scratch = ifft.make_scratch_vec();
    let scale = 1.0 / cfg.fft_len as f64;
    let mut acc = vec![0.0; norm.len()];
    for t in 0..n_frames {
        for f in 0..nf {
            spec[f] = Complex::new(re.data()[t * nf + f].f64(), im.data()[t * nf + f].f64());
        }
        spec[0].im = 0.0;
        if cfg.fft_len % 2 == 0 {
            spec[nf - 1].im = 0.0;
        }
        ifft.process_with_scratch(&mut spec, &mut buf, &mut scratch)
            .map_err(|e| Error::Degenerate(e.to_string()))?;
        for (j, w) in win.iter().enumerate() {
            acc[t * cfg.hop + j] += w * buf[off + j] * scale;
        }
    }
    let pad = cfg.pad();
    let mut out = vec![T::zero(); out_len];
    for n in 0..covered {
        out[n] = T::of(acc[n + pad] / norm[n + pad]);
    }
    Tensor::new(vec![out_len], out)
}

/// Adjoint of [`istft_parts`] as a linear map of `(re, im)`.
pub fn istft_parts_adjoint<T: Real>(
    g: &Tensor<T>,
    n_frames: usize,
    cfg: &StftConfig,
) -> Result<(Tensor<T>, Tensor<T>)> {
    cfg.validate()?;
    if g.rank() != 1 || n_frames == 0 {
        return shape_err(format!(
            "istft adjoint expects a 1-D gradient, got {:?}",
            g.shape()
        ));
    }
    let out_len = g.numel();
    let nf = cfg.n_freqs();
    let (norm, covered) = checked_norm(cfg, n_frames, out_len)?;
    let pad = cfg.pad();
    let mut gp = vec![0.0; norm.len()];
    for n in 0..covered {
        gp[n + pad] = g.data()[n].f64() / norm[n + pad];
    }
    let win = cfg.window();
    let off = cfg.offset();
    let fft = PLANNER.with(|p| p.borrow_mut().plan_fft_forward(cfg.fft_len));
    let mut buf = fft.make_input_vec();
    let mut spec = fft.make_output_vec();
    let mut scratch = fft.make_scratch_vec();
    let n = cfg.fft_len as f64;
    let mut gre = Vec::with_capacity(n_frames * nf);
    let mut gim = Vec::with_capacity(n_frames * nf);
    for t in 0..n_frames {
        buf.iter_mut().for_each(|v| *v = 0.0);
        for (j, w) in win.iter().enumerate() {
            buf[off + j] = gp[t * cfg.hop + j] * w;
        }
        fft.process_with_scratch(&mut buf, &mut spec, &mut scratch)
            .map_err(|e| Error::Degenerate(e.to_string()))?;
        for (f, c) in spec.iter().enumerate() {
            let edge = f == 0 || (cfg.fft_len % 2 == 0 && f == nf - 1);
            let w = if edge { 1.0 } else { 2.0 } / n;
            gre.push(T::of(c.re * w));
            gim.push(T::of(if edge { 0.0 } else { c.im * w }));
        }
    }
    Ok((
        Tensor::new(vec![n_frames, nf], gre)?,
        Tensor::new(vec![n_frames, nf], gim)?,
    ))
}

pub fn istft(spec: &Spectrum, cfg: &StftConfig, out_len: usize) -> Result<Vec<f64>> {
    Ok(istft_parts(&spec.re, &spec.im, cfg, out_len)?.into_data())
}

/// Elementwise `mag^c`.
pub fn compress_mag<T: Real>(mag: &Tensor<T>, c: f64) -> Result<Tensor<T>> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::Domain(format!(
            "compression exponent {c} outside (0, 1]"
        )));
    }
    if let Some(v) = mag.data().iter().find(|v| !(**v >= T::zero())) {
        return Err(Error::Domain(format!(
            "magnitude must be non-negative, got {v}"
        )));
    }
    let c = T::of(c);
    Ok(mag.map(|m| if m == T::zero() { m } else { m.powf(c) }))
}

/// Elementwise `cmag^(1/c)`.
pub fn decompress_mag<T: Real>(cmag: &Tensor<T>, c: f64) -> Result<Tensor<T>> {
    if !(c > 0.0 && c <= 1.0) {
        return Err(Error::Domain(format!(
            "compression exponent {c} outside (0, 1]"
        )));
    }
    if let Some(v) = cmag.data().iter().find(|v| !(**v >= T::zero())) {
        return Err(Error::Domain(format!(
            "compressed magnitude must be non-negative, got {v}"
        )));
    }
    let e = T::of(1.0 / c);
    Ok(cmag.map(|m| if m == T::zero() { m } else { m.powf(e) }))
}

/// Compressed magnitude and phase, each frames × bins.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectroPair<T: Real = f64> {
    pub cmag: Tensor<T>,
    pub pha: Tensor<T>,
}

impl SpectroPair<f64> {
    pub fn from_spectrum(spec: &Spectrum, c: f64) -> Result<Self> {
        Ok(Self {
            cmag: compress_mag(&spec.magnitude(), c)?,
            pha: spec.phase(),
        })
    }

    pub fn analyze(wave: &[f64], cfg: &StftConfig) -> Result<Self> {
        Self::from_spectrum(&stft(wave, cfg)?, cfg.compression)
    }

    pub fn to_spectrum(&self, c: f64) -> Result<Spectrum> {
        Spectrum::from_polar(&decompress_mag(&self.cmag, c)?, &self.pha)
    }

    pub fn synthesize(&self, cfg: &StftConfig, out_len: usize) -> Result<Vec<f64>> {
        istft(&self.to_spectrum(cfg.compression)?, cfg, out_len)
    }
}

impl<T: Real> SpectroPair<T> {
    pub fn n_frames(&self) -> usize {
        self.cmag.dim(0)
    }

    pub fn n_freqs(&self) -> usize {
        self.cmag.dim(1)
    }

    pub fn cast<U: Real>(&self) -> SpectroPair<U> {
        SpectroPair {
            cmag: self.cmag.cast(),
            pha: self.pha.cast(),
        }
    }
}

/// Stacks M pairs into `[2M, T, F]` as `[cmag0, pha0, cmag1, pha1, ...]`.
pub fn pack_features<T: Real>(specs: &[SpectroPair<T>]) -> Result<Tensor<T>> {
    let Some(first) = specs.first() else {
        return shape_err("pack_features needs at least one channel");
    };
    let shape = first.cmag.shape().to_vec();
    if shape.len() != 2 {
        return shape_err(format!("spectra must be [T,F], got {shape:?}"));
    }
    let mut data = Vec::with_capacity(2 * specs.len() * first.cmag.numel());
    for (m, s) in specs.iter().enumerate() {
        if s.cmag.shape() != shape.as_slice() || s.pha.shape() != shape.as_slice() {
            return shape_err(format!(
                "channel {m} has cmag {:?} / pha {:?}, channel 0 has {shape:?}",
                s.cmag.shape(),
                s.pha.shape()
            ));
        }
        data.extend_from_slice(s.cmag.data());
        data.extend_from_slice(s.pha.data());
    }
    Tensor::new(vec![2 * specs.len(), shape[0], shape[1]], data)
}

pub fn unpack_features<T: Real>(features: &Tensor<T>) -> Result<Vec<SpectroPair<T>>> {
    if features.rank() != 3 || features.dim(0) % 2 != 0 || features.dim(0) == 0 {
        return shape_err(format!(
            "features must be [2M,T,F], got {:?}",
            features.shape()
        ));
    }
    let (t, f) = (features.dim(1), features.dim(2));
    let plane = t * f;
    features
        .data()
        .chunks(2 * plane)
        .map(|ch| {
            Ok(SpectroPair {
                cmag: Tensor::new(vec![t, f], ch[..plane].to_vec())?,
                pha: Tensor::new(vec![t, f], ch[plane..].to_vec())?,
            })
        })
        .collect()
}

/// Analyzes every channel of a multi-channel signal and packs the result.
pub fn multichannel_features(
    channels: &[Vec<f64>],
    cfg: &StftConfig,
) -> Result<(Tensor<f64>, Vec<SpectroPair>)> {
    let pairs = channels
        .iter()
        .map(|c| SpectroPair::analyze(c, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok((pack_features(&pairs)?, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snr_db(reference: &[f64], est: &[f64]) -> f64 {
        let e: f64 = reference.iter().map(|v| v * v).sum();
        let n: f64 = reference
            .iter()
            .zip(est)
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        10.0 * (e / n).log10()
    }

    #[test]
    fn frame_count_formula() {
        let cfg = StftConfig::default();
        let s = stft(&vec![0.0; 1600], &cfg).unwrap();
        assert_eq!(s.n_frames(), 1 + 1600 / 100);
        assert_eq!(s.n_freqs(), 201);
        assert!(s.re.data().iter().chain(s.im.data()).all(|v| *v == 0.0));
    }

    #[test]
    fn short_input_rejected() {
        let cfg = StftConfig::default();
        assert!(matches!(
            stft(&[0.0; 399], &cfg),
            Err(Error::InputTooShort {
                needed: 400,
                got: 399
            })
        ));
    }

    #[test]
    fn periodic_hann_is_cola_at_quarter_hop() {
        let cfg = StftConfig::default();
        let w = cfg.window();
        for n in 0..cfg.hop {
            let s: f64 = (0..4).map(|k| w[n + k * cfg.hop]).sum();
            assert!((s - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn tone_at_bin_center() {
        let cfg = StftConfig::default();
        let k = 25;
        let x: Vec<f64> = (0..4000)
            .map(|n| (2.0 * PI * k as f64 * n as f64 / cfg.fft_len as f64).cos())
            .collect();
        let mag = stft(&x, &cfg).unwrap().magnitude();
        let row = &mag.data()[5 * 201..6 * 201];
        let peak = row[k];
        for (f, v) in row.iter().enumerate() {
            if (f as isize - k as isize).abs() > 1 {
                assert!(20.0 * (v / peak).log10() < -40.0, "bin {f}");
            }
        }
    }

    #[test]
    fn round_trip_and_fft_oversampling() {
        let x: Vec<f64> = (0..3000)
            .map(|n| ((n * 7919) % 1013) as f64 / 1013.0 - 0.5)
            .collect();
        for cfg in [
            StftConfig::default(),
            StftConfig {
                fft_len: 512,
                ..Default::default()
            },
            StftConfig {
                window_len: 16,
                hop: 4,
                fft_len: 17,
                ..Default::default()
            },
        ] {
            let y = istft(&stft(&x, &cfg).unwrap(), &cfg, x.len()).unwrap();
            assert!(snr_db(&x, &y) > 100.0);
        }
    }

    #[test]
    fn istft_zero_and_padding() {
        let cfg = StftConfig::default();
        let spec = Spectrum {
            re: Tensor::zeros(vec![5, 201]),
            im: Tensor::zeros(vec![5, 201]),
        };
        let y = istft(&spec, &cfg, 2000).unwrap();
        assert_eq!(y.len(), 2000);
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_frame_reconstruction_is_normalized_windowed_frame() {
        // one frame covering samples [-200, 200) of the padded domain
        let cfg = StftConfig {
            window_len: 8,
            hop: 2,
            fft_len: 8,
            ..Default::default()
        };
        let frame: Vec<f64> = (0..8).map(|j| (j as f64 * 0.7).sin()).collect();
        let w = cfg.window();
        let windowed: Vec<f64> = frame.iter().zip(&w).map(|(a, b)| a * b).collect();
        // forward DFT of the windowed frame, computed directly
        let mut re = vec![0.0; 5];
        let mut im = vec![0.0; 5];
        for f in 0..5 {
            for (k, v) in windowed.iter().enumerate() {
                let ph = -2.0 * PI * (f * k) as f64 / 8.0;
                re[f] += v * ph.cos();
                im[f] += v * ph.sin();
            }
        }
        let spec = Spectrum {
            re: Tensor::new(vec![1, 5], re).unwrap(),
            im: Tensor::new(vec![1, 5], im).unwrap(),
        };
        let y = istft(&spec, &cfg, 3).unwrap();
        for n in 0..3 {
            let j = n + 4;
            let expect = windowed[j] * w[j] / (w[j] * w[j]);
            assert!((y[n] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_normalization_detected() {
        // hop == window with a window that vanishes at its first sample
        let cfg = StftConfig {
            window_len: 8,
            hop: 8,
            fft_len: 8,
            ..Default::default()
        };
        let spec = Spectrum {
            re: Tensor::zeros(vec![3, 5]),
            im: Tensor::zeros(vec![3, 5]),
        };
        assert!(matches!(istft(&spec, &cfg, 16), Err(Error::Degenerate(_))));
    }

    #[test]
    fn adjoint_identity() {
        let cfg = StftConfig {
            window_len: 16,
            hop: 4,
            fft_len: 16,
            ..Default::default()
        };
        let (t, f, n) = (7, 9, 30);
        let re: Vec<f64> = (0..t * f)
            .map(|i| ((i * 37) % 17) as f64 / 17.0 - 0.4)
            .collect();
        let im: Vec<f64> = (0..t * f)
            .map(|i| ((i * 53) % 23) as f64 / 23.0 - 0.6)
            .collect();
        let g: Vec<f64> = (0..n).map(|i| ((i * 11) % 7) as f64 - 3.0).collect();
        let re = Tensor::new(vec![t, f], re).unwrap();
        let mut im = Tensor::new(vec![t, f], im).unwrap();
        // imaginary parts of the DC and Nyquist bins are ignored by synthesis
        for r in 0..t {
            im.data_mut()[r * f] = 0.0;
            im.data_mut()[r * f + f - 1] = 0.0;
        }
        let y = istft_parts(&re, &im, &cfg, n).unwrap();
        let (gr, gi) =
            istft_parts_adjoint(&Tensor::new(vec![n], g.clone()).unwrap(), t, &cfg).unwrap();
        let lhs: f64 = y.data().iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = re
            .data()
            .iter()
            .zip(gr.data())
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + im.data()
                .iter()
                .zip(gi.data())
                .map(|(a, b)| a * b)
                .sum::<f64>();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn compression_fixed_points_and_errors() {
        let m = Tensor::from_f64(vec![3], &[0.0, 1.0, 2.0]).unwrap();
        let c = compress_mag(&m, 0.3).unwrap();
        assert_eq!(c.data()[0], 0.0);
        assert_eq!(c.data()[1], 1.0);
        assert_eq!(compress_mag(&m, 1.0).unwrap(), m);
        let back: Tensor<f64> = decompress_mag(&c, 0.3).unwrap();
        assert!((back.data()[2] - 2.0).abs() < 1e-12);
        let neg = Tensor::<f64>::from_f64(vec![1], &[-1e-9]).unwrap();
        assert!(matches!(compress_mag(&neg, 0.3), Err(Error::Domain(_))));
    }

    #[test]
    fn pack_layout_and_errors() {
        let p = |v: f64| SpectroPair {
            cmag: Tensor::full(vec![2, 3], v),
            pha: Tensor::full(vec![2, 3], -v),
        };
        let f = pack_features(&[p(1.0), p(2.0)]).unwrap();
        assert_eq!(f.shape(), &[4, 2, 3]);
        assert_eq!(f.data()[0], 1.0);
        assert_eq!(f.data()[6], -1.0);
        assert_eq!(f.data()[12], 2.0);
        assert_eq!(unpack_features(&f).unwrap(), vec![p(1.0), p(2.0)]);
        let bad = SpectroPair {
            cmag: Tensor::zeros(vec![3, 3]),
            pha: Tensor::zeros(vec![3, 3]),
        };
        assert!(matches!(
            pack_features(&[p(1.0), bad]),
            Err(Error::Shape(_))
        ));
    }
}
