//! The multi-channel generator: 1x1 input projection, dilated dense encoder,
//! TF-Mamba stack, and the magnitude-mask and phase decoders.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dAttrs, ConvTranspose2dAttrs, Graph, ParamId, ParamStore, Var};
use crate::dsp::{self, SpectroPair, StftConfig};
use crate::error::{Error, Result};
use crate::mamba::{MambaUnitConfig, TfBlock, TfBlockConfig};
use crate::ssm::ScanStrategy;
use crate::tensor::{Real, Tensor};

pub const IN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_mics: usize,
    pub reference_mic: usize,
    pub c_mid: usize,
    pub n_tf_blocks: usize,
    pub densenet_depth: usize,
    pub densenet_dilations: Vec<usize>,
    /// Instance norm + PReLU after each dense layer's conv.
    pub densenet_norm: bool,
    pub mask_beta: f64,
    pub n_state: usize,
    pub expand: usize,
    pub d_conv: usize,
    pub tconv_kernel: usize,
    pub shared_directions: bool,
    pub scan_strategy: ScanStrategy,
    /// RMS norm at the input of every Mamba unit.
    pub mamba_pre_norm: bool,
    pub desk_scale: bool,
    pub stft: StftConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper(6)
    }
}

impl ModelConfig {
    pub fn paper(n_mics: usize) -> Self {
        Self {
            n_mics,
            reference_mic: default_reference(n_mics),
            c_mid: 64,
            n_tf_blocks: 4,
            densenet_depth: 4,
            densenet_dilations: vec![1, 2, 4, 8],
            densenet_norm: true,
            mask_beta: 2.0,
            n_state: 16,
            expand: 2,
            d_conv: 4,
            tconv_kernel: 4,
            shared_directions: false,
            scan_strategy: ScanStrategy::default(),
            mamba_pre_norm: true,
            desk_scale: false,
            stft: StftConfig::default(),
        }
    }

    pub fn desk(n_mics: usize) -> Self {
        Self {
            c_mid: 16,
            n_tf_blocks: 2,
            n_state: 8,
            desk_scale: true,
            ..Self::paper(n_mics)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_mics", self.n_mics),
            ("c_mid", self.c_mid),
            ("n_tf_blocks", self.n_tf_blocks),
            ("densenet_depth", self.densenet_depth),
            ("n_state", self.n_state),
            ("expand", self.expand),
            ("d_conv", self.d_conv),
            ("tconv_kernel", self.tconv_kernel),
        ];
        if let Some((k, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be at least 1")));
        }
        if self.densenet_dilations.len() != self.densenet_depth {
            return Err(Error::Config(format!(
                "densenet_dilations has {} entries, densenet_depth is {}",
                self.densenet_dilations.len(),
                self.densenet_depth
            )));
        }
        if self.densenet_dilations.contains(&0) {
            return Err(Error::Config("densenet dilations must be positive".into()));
        }
        if self.reference_mic >= self.n_mics {
            return Err(Error::Config(format!(
                "reference_mic {} out of range for {} mics",
                self.reference_mic, self.n_mics
            )));
        }
        if !(self.mask_beta > 0.0) {
            return Err(Error::Config(format!(
                "mask_beta {} must be positive",
                self.mask_beta
            )));
        }
        self.stft.validate()
    }

    pub fn n_freqs(&self) -> usize {
        self.stft.n_freqs()
    }

    /// Frequency bins after the stride-2 encoder conv.
    pub fn n_freqs_down(&self) -> usize {
        (self.n_freqs() - 1) / 2 + 1
    }

    fn tf_block_config(&self) -> TfBlockConfig {
        TfBlockConfig {
            unit: MambaUnitConfig {
                d_model: self.c_mid,
                expand: self.expand,
                d_conv: self.d_conv,
                n_state: self.n_state,
                strategy: self.scan_strategy,
                pre_norm: self.mamba_pre_norm,
            },
            tconv_kernel: self.tconv_kernel,
            shared_directions: self.shared_directions,
        }
    }
}

/// Position of the fifth array microphone within the standard `n_mics` subset.
pub fn default_reference(n_mics: usize) -> usize {
    match n_mics {
        2 | 3 => 1,
        4 => 2,
        5 => 3,
        6 => 4,
        _ => 0,
    }
}

fn conv_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

/// Conv weight and bias, torch-style uniform init.
#[derive(Clone, Debug)]
struct ConvParams {
    weight: ParamId,
    bias: ParamId,
}

impl ConvParams {
    fn conv<T: Real>(
        name: &str,
        shape: [usize; 4],
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = shape[1] * shape[2] * shape[3];
        let b = conv_bound(fan_in);
        Ok(Self {
            weight: store.add_uniform(format!("{name}.weight"), shape.to_vec(), b, rng)?,
            bias: store.add_uniform(format!("{name}.bias"), vec![shape[0]], b, rng)?,
        })
    }

    fn conv_transpose<T: Real>(
        name: &str,
        shape: [usize; 4],
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = shape[1] * shape[2] * shape[3];
        let b = conv_bound(fan_in);
        Ok(Self {
            weight: store.add_uniform(format!("{name}.weight"), shape.to_vec(), b, rng)?,
            bias: store.add_uniform(format!("{name}.bias"), vec![shape[1]], b, rng)?,
        })
    }

    fn vars<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> (Var, Var) {
        (g.param(store, self.weight), g.param(store, self.bias))
    }
}

/// Instance norm (affine) followed by per-channel PReLU.
#[derive(Clone, Debug)]
struct NormAct {
    gamma: ParamId,
    beta: ParamId,
    slope: ParamId,
}

impl NormAct {
    fn new<T: Real>(prefix: &str, c: usize, store: &mut ParamStore<T>) -> Result<Self> {
        Ok(Self {
            gamma: store.add(
                format!("{prefix}.norm.weight"),
                Tensor::full(vec![c], T::one()),
            )?,
            beta: store.add(format!("{prefix}.norm.bias"), Tensor::zeros(vec![c]))?,
            slope: store.add(
                format!("{prefix}.prelu.weight"),
                Tensor::full(vec![c], T::of(0.25)),
            )?,
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let y = g.instance_norm(x, gamma, beta, IN_EPS)?;
        let a = g.param(store, self.slope);
        g.prelu(y, a)
    }
}

#[derive(Clone, Debug)]
struct DenseLayer {
    conv: ConvParams,
    dilation: usize,
    /// Without norm the layer keeps a PReLU so it stays nonlinear.
    norm: Option<NormAct>,
    slope: Option<ParamId>,
}

/// Dilated dense block: layer `i` sees the concatenation of the input and
/// every earlier layer's output.
#[derive(Clone, Debug)]
pub struct DilatedDenseNet {
    layers: Vec<DenseLayer>,
}

impl DilatedDenseNet {
    pub fn new<T: Real>(
        prefix: &str,
        c: usize,
        dilations: &[usize],
        norm: bool,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(dilations.len());
        for (i, &d) in dilations.iter().enumerate() {
            let p = format!("{prefix}.layers.{i}");
            let conv = ConvParams::conv(&format!("{p}.conv"), [c, c * (i + 1), 3, 3], store, rng)?;
            let (norm, slope) = if norm {
                (Some(NormAct::new(&p, c, store)?), None)
            } else {
                let s = store.add(
                    format!("{p}.prelu.weight"),
                    Tensor::full(vec![c], T::of(0.25)),
                )?;
                (None, Some(s))
            };
            layers.push(DenseLayer {
                conv,
                dilation: d,
                norm,
                slope,
            });
        }
        Ok(Self { layers })
    }

    /// `x [c, T, F] -> [c, T, F]`
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut skip = x;
        let mut out = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let (w, b) = layer.conv.vars(g, store);
            let attrs = Conv2dAttrs {
                stride: (1, 1),
                padding: (layer.dilation, 1),
                dilation: (layer.dilation, 1),
            };
            let y = g.conv2d(skip, w, Some(b), attrs)?;
            out = match (&layer.norm, layer.slope) {
                (Some(n), _) => n.forward(g, store, y)?,
                (None, Some(s)) => {
                    let a = g.param(store, s);
                    g.prelu(y, a)?
                }
                (None, None) => y,
            };
            if i + 1 < self.layers.len() {
                skip = g.concat(&[out, skip], 0)?;
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
struct Encoder {
    g_cnn: ConvParams,
    act_in: NormAct,
    densenet: DilatedDenseNet,
    down: ConvParams,
    act_out: NormAct,
}

#[derive(Clone, Debug)]
struct DecoderTrunk {
    densenet: DilatedDenseNet,
    up: ConvParams,
    act: NormAct,
}

impl DecoderTrunk {
    fn new<T: Real>(
        prefix: &str,
        cfg: &ModelConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let c = cfg.c_mid;
        Ok(Self {
            densenet: DilatedDenseNet::new(
                &format!("{prefix}.densenet"),
                c,
                &cfg.densenet_dilations,
                cfg.densenet_norm,
                store,
                rng,
            )?,
            up: ConvParams::conv_transpose(
                &format!("{prefix}.upsample"),
                [c, c, 1, 3],
                store,
                rng,
            )?,
            act: NormAct::new(&format!("{prefix}.upsample"), c, store)?,
        })
    }

    fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        h: Var,
        n_freqs: usize,
    ) -> Result<Var> {
        let x = self.densenet.forward(g, store, h)?;
        let f_down = g.shape(x)[2];
        let restored = 2 * f_down - 1;
        if n_freqs < restored || n_freqs > restored + 1 {
            return Err(Error::Shape(format!(
                "cannot restore {n_freqs} bins from {f_down}"
            )));
        }
        let (w, b) = self.up.vars(g, store);
        let attrs = ConvTranspose2dAttrs {
            stride: (1, 2),
            padding: (0, 1),
            output_padding: (0, n_freqs - restored),
        };
        let y = g.conv_transpose2d(x, w, Some(b), attrs)?;
        self.act.forward(g, store, y)
    }
}

/// Differentiable generator outputs.
#[derive(Clone, Copy, Debug)]
pub struct OutputVars {
    pub y_cmag: Var,
    pub y_pha: Var,
    pub mask: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorOutput<T: Real> {
    pub y_cmag: Tensor<T>,
    pub y_pha: Tensor<T>,
    pub mask: Tensor<T>,
}

/// Parameter handles of the generator; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: ModelConfig,
    encoder: Encoder,
    pub tf_blocks: Vec<TfBlock>,
    mask_trunk: DecoderTrunk,
    mask_out: ConvParams,
    lsigmoid_slope: ParamId,
    phase_trunk: DecoderTrunk,
    phase_real: ConvParams,
    phase_imag: ConvParams,
}

impl Generator {
    pub fn new<T: Real>(
        cfg: ModelConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.c_mid;
        let encoder = Encoder {
            g_cnn: ConvParams::conv("encoder.g_cnn", [c, 2 * cfg.n_mics, 1, 1], store, rng)?,
            act_in: NormAct::new("encoder.g_cnn", c, store)?,
            densenet: DilatedDenseNet::new(
                "encoder.densenet",
                c,
                &cfg.densenet_dilations,
                cfg.densenet_norm,
                store,
                rng,
            )?,
            down: ConvParams::conv("encoder.downsample", [c, c, 1, 3], store, rng)?,
            act_out: NormAct::new("encoder.downsample", c, store)?,
        };
        let tf_blocks = (0..cfg.n_tf_blocks)
            .map(|i| TfBlock::new(&format!("tf_blocks.{i}"), cfg.tf_block_config(), store, rng))
            .collect::<Result<Vec<_>>>()?;
        let mask_trunk = DecoderTrunk::new("mask_decoder", &cfg, store, rng)?;
        let mask_out = ConvParams::conv("mask_decoder.out", [1, c, 1, 1], store, rng)?;
        let lsigmoid_slope = store.add(
            "mask_decoder.lsigmoid.slope",
            Tensor::full(vec![cfg.n_freqs()], T::one()),
        )?;
        let phase_trunk = DecoderTrunk::new("phase_decoder", &cfg, store, rng)?;
        let phase_real = ConvParams::conv("phase_decoder.real", [1, c, 1, 1], store, rng)?;
        let phase_imag = ConvParams::conv("phase_decoder.imag", [1, c, 1, 1], store, rng)?;
        Ok(Self {
            cfg,
            encoder,
            tf_blocks,
            mask_trunk,
            mask_out,
            lsigmoid_slope,
            phase_trunk,
            phase_real,
            phase_imag,
        })
    }

    pub fn g_cnn_weight(&self) -> ParamId {
        self.encoder.g_cnn.weight
    }

    pub fn g_cnn_bias(&self) -> ParamId {
        self.encoder.g_cnn.bias
    }

    pub fn lsigmoid_slope(&self) -> ParamId {
        self.lsigmoid_slope
    }

    /// `features [2M, T, F] -> [c_mid, T, F]`
    pub fn input_proj<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        features: Var,
    ) -> Result<Var> {
        let shape = g.shape(features).to_vec();
        if shape.len() != 3 || shape[0] != 2 * self.cfg.n_mics {
            return Err(Error::Config(format!(
                "features {shape:?} do not match a {}-mic model (expected leading dim {})",
                self.cfg.n_mics,
                2 * self.cfg.n_mics
            )));
        }
        if shape[2] != self.cfg.n_freqs() {
            return Err(Error::Shape(format!(
                "features have {} bins, config expects {}",
                shape[2],
                self.cfg.n_freqs()
            )));
        }
        let (w, b) = self.encoder.g_cnn.vars(g, store);
        g.conv2d(features, w, Some(b), Conv2dAttrs::default())
    }

    /// `x [c_mid, T, F] -> [c_mid, T, F']`, the part of the encoder after `input_proj`.
    pub fn dense_encoder<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let e = &self.encoder;
        let x = e.act_in.forward(g, store, x)?;
        let x = e.densenet.forward(g, store, x)?;
        let (w, b) = e.down.vars(g, store);
        let attrs = Conv2dAttrs {
            stride: (1, 2),
            padding: (0, 1),
            dilation: (1, 1),
        };
        let x = g.conv2d(x, w, Some(b), attrs)?;
        e.act_out.forward(g, store, x)
    }

    /// Returns `(mask, y_cmag)`, each `[T, F]`.
    pub fn mask_decoder<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        h: Var,
        x_cmag_ref: Var,
    ) -> Result<(Var, Var)> {
        let f = self.cfg.n_freqs();
        let y = self.mask_trunk.forward(g, store, h, f)?;
        let (w, b) = self.mask_out.vars(g, store);
        let z = g.conv2d(y, w, Some(b), Conv2dAttrs::default())?;
        let t = g.shape(z)[1];
        let z = g.reshape(z, vec![t, f])?;
        let alpha = g.param(store, self.lsigmoid_slope);
        let z = g.mul(z, alpha)?;
        let s = g.sigmoid(z)?;
        let mask = g.scale(s, self.cfg.mask_beta)?;
        let y_cmag = g.mul(mask, x_cmag_ref)?;
        Ok((mask, y_cmag))
    }

    /// `h [c_mid, T, F'] -> phase [T, F]`
    pub fn phase_decoder<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        h: Var,
    ) -> Result<Var> {
        let f = self.cfg.n_freqs();
        let y = self.phase_trunk.forward(g, store, h, f)?;
        let (wr, br) = self.phase_real.vars(g, store);
        let r = g.conv2d(y, wr, Some(br), Conv2dAttrs::default())?;
        let (wi, bi) = self.phase_imag.vars(g, store);
        let i = g.conv2d(y, wi, Some(bi), Conv2dAttrs::default())?;
        let t = g.shape(r)[1];
        let r = g.reshape(r, vec![t, f])?;
        let i = g.reshape(i, vec![t, f])?;
        g.atan2(i, r)
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        features: Var,
        x_cmag_ref: Var,
    ) -> Result<OutputVars> {
        let x = self.input_proj(g, store, features)?;
        let mut h = self.dense_encoder(g, store, x)?;
        for blk in &self.tf_blocks {
            h = blk.forward(g, store, h)?;
        }
        let (mask, y_cmag) = self.mask_decoder(g, store, h, x_cmag_ref)?;
        let y_pha = self.phase_decoder(g, store, h)?;
        Ok(OutputVars {
            y_cmag,
            y_pha,
            mask,
        })
    }
}

/// A generator together with its weights.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub net: Generator,
    pub params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Generator::new(cfg, &mut params, &mut rng)?;
        Ok(Self { net, params })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.net.cfg
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            net: self.net.clone(),
            params: self.params.cast(),
        }
    }

    pub fn forward(
        &self,
        features: &Tensor<T>,
        x_cmag_ref: &Tensor<T>,
    ) -> Result<GeneratorOutput<T>> {
        let mut g = Graph::new();
        let f = g.constant(features.clone());
        let r = g.constant(x_cmag_ref.clone());
        let out = self.net.forward(&mut g, &self.params, f, r)?;
        Ok(GeneratorOutput {
            y_cmag: g.value(out.y_cmag).clone(),
            y_pha: g.value(out.y_pha).clone(),
            mask: g.value(out.mask).clone(),
        })
    }

    /// Multi-channel waveform in, enhanced reference-channel waveform out.
    pub fn enhance(&self, channels: &[Vec<f64>]) -> Result<Vec<f64>> {
        let cfg = self.cfg();
        if channels.len() != cfg.n_mics {
            return Err(Error::Config(format!(
                "input has {} channels, model expects {}",
                channels.len(),
                cfg.n_mics
            )));
        }
        let (feats, pairs) = dsp::multichannel_features(channels, &cfg.stft)?;
        let out = self.forward(&feats.cast(), &pairs[cfg.reference_mic].cmag.cast())?;
        let pair = SpectroPair {
            cmag: out.y_cmag.cast::<f64>(),
            pha: out.y_pha.cast::<f64>(),
        };
        pair.synthesize(&cfg.stft, channels[0].len())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamBreakdown {
    pub modules: BTreeMap<String, usize>,
    pub total: usize,
}

fn module_path(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    let depth = if parts[0] == "tf_blocks" { 3 } else { 2 };
    parts[..depth.min(parts.len() - 1).max(1)].join(".")
}

/// Exact parameter count of a generator built from `cfg`.
pub fn param_count(cfg: &ModelConfig) -> Result<ParamBreakdown> {
    let model = Model::<f32>::new(cfg.clone(), 0)?;
    let mut modules = BTreeMap::new();
    for p in model.params.iter() {
        *modules.entry(module_path(&p.name)).or_insert(0) += p.value.numel();
    }
    Ok(ParamBreakdown {
        total: model.params.num_scalars(),
        modules,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_cfg(m: usize) -> ModelConfig {
        ModelConfig {
            c_mid: 4,
            n_tf_blocks: 1,
            densenet_depth: 2,
            densenet_dilations: vec![1, 2],
            n_state: 2,
            stft: StftConfig {
                window_len: 16,
                hop: 4,
                fft_len: 16,
                ..Default::default()
            },
            ..ModelConfig::desk(m)
        }
    }

    #[test]
    fn shapes_and_ranges() {
        let cfg = toy_cfg(3);
        let model = Model::<f64>::new(cfg, 7).unwrap();
        let feats = Tensor::from_f64(
            vec![6, 8, 9],
            &(0..6 * 72)
                .map(|i| (i as f64 * 0.13).sin())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let cmag = Tensor::from_f64(
            vec![8, 9],
            &(0..72).map(|i| (i % 5) as f64 * 0.2).collect::<Vec<_>>(),
        )
        .unwrap();
        let out = model.forward(&feats, &cmag).unwrap();
        assert_eq!(out.y_cmag.shape(), &[8, 9]);
        assert_eq!(out.y_pha.shape(), &[8, 9]);
        assert!(out.mask.data().iter().all(|&m| m > 0.0 && m < 2.0));
        assert!(out
            .y_pha
            .data()
            .iter()
            .all(|&p| p > -std::f64::consts::PI && p <= std::f64::consts::PI));
    }

    #[test]
    fn wrong_mic_count_is_config_error() {
        let model = Model::<f64>::new(toy_cfg(2), 0).unwrap();
        let err = model
            .forward(&Tensor::zeros(vec![6, 4, 9]), &Tensor::zeros(vec![4, 9]))
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn encoder_halves_frequency() {
        assert_eq!(ModelConfig::paper(6).n_freqs_down(), 101);
    }

    #[test]
    fn odd_and_even_bin_counts_restore() {
        for fft_len in [16, 18] {
            let mut cfg = toy_cfg(1);
            cfg.stft.fft_len = fft_len;
            let f = cfg.n_freqs();
            let model = Model::<f64>::new(cfg, 1).unwrap();
            let out = model
                .forward(
                    &Tensor::full(vec![2, 3, f], 0.5),
                    &Tensor::full(vec![3, f], 1.0),
                )
                .unwrap();
            assert_eq!(out.y_pha.shape(), &[3, f]);
        }
    }

    #[test]
    fn breakdown_sums_to_total() {
        let b = param_count(&ModelConfig::desk(6)).unwrap();
        assert_eq!(b.modules.values().sum::<usize>(), b.total);
        assert!(b.modules.contains_key("encoder.g_cnn"));
        assert!(b.modules.contains_key("tf_blocks.1.time"));
    }
}
