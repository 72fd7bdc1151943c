//! Losses, optimizer, learning-rate schedule, epoch loop and checkpoints.

pub mod checkpoint;
pub mod loss;
pub mod optim;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::dsp::{multichannel_features, SpectroPair};
use crate::error::{Error, Result};
use crate::metrics::si_sdr;
use crate::network::{Model, ModelConfig};
use crate::sim::MixtureItem;
use crate::tensor::{Real, Tensor};

pub use checkpoint::{load_checkpoint, load_checkpoint_with, read_header, save_checkpoint};
pub use loss::{phase_loss, total_loss, LossParts, LossTargets, LossWeights};
pub use optim::{clip_grad_norm, AdamW};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationMetric {
    #[default]
    SiSdr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub lr_decay_per_epoch: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub validation_metric: ValidationMetric,
    /// Random training crop length; `None` trains on whole items.
    pub crop_seconds: Option<f64>,
    pub clip_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            betas: (0.8, 0.99),
            eps: 1e-8,
            weight_decay: 1e-2,
            lr_decay_per_epoch: 0.99,
            epochs: 50,
            batch_size: 1,
            loss_weights: LossWeights::default(),
            seed: 0,
            validation_metric: ValidationMetric::SiSdr,
            crop_seconds: Some(2.0),
            clip_grad_norm: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss_weights.validate()?;
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(self.lr_decay_per_epoch > 0.0 && self.lr_decay_per_epoch <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay_per_epoch must be in (0, 1], got {}",
                self.lr_decay_per_epoch
            )));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config(format!(
                "betas must lie in [0, 1), got {:?}",
                self.betas
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.crop_seconds.is_some_and(|c| !(c > 0.0))
            || self.clip_grad_norm.is_some_and(|c| !(c > 0.0))
        {
            return Err(Error::Config(
                "crop_seconds and clip_grad_norm must be positive when set".into(),
            ));
        }
        Ok(())
    }

    /// `lr · decay^epoch`
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay_per_epoch.powi(epoch as i32)
    }
}

/// Network inputs and loss targets for one item.
#[derive(Clone, Debug)]
pub struct Example<T: Real> {
    pub id: String,
    pub features: Tensor<T>,
    pub x_cmag_ref: Tensor<T>,
    pub targets: LossTargets<T>,
}

pub fn prepare<T: Real>(item: &MixtureItem, cfg: &ModelConfig) -> Result<Example<T>> {
    let item = item.for_mics(cfg.n_mics)?;
    if item.reference_index != cfg.reference_mic {
        return Err(Error::Config(format!(
            "item {} has reference channel {}, model expects {}",
            item.id, item.reference_index, cfg.reference_mic
        )));
    }
    let (features, pairs) = multichannel_features(&item.noisy, &cfg.stft)?;
    let clean = SpectroPair::analyze(&item.clean_ref, &cfg.stft)?;
    Ok(Example {
        id: item.id.clone(),
        features: features.cast(),
        x_cmag_ref: pairs[cfg.reference_mic].cmag.cast(),
        targets: LossTargets {
            cmag: clean.cmag.cast(),
            pha: clean.pha.cast(),
            wave: Tensor::from_f64(vec![item.len()], &item.clean_ref)?,
        },
    })
}

/// Forward, loss and backward for one example; gradients accumulate in the
/// model's store.
pub fn accumulate_gradients<T: Real>(
    model: &mut Model<T>,
    ex: &Example<T>,
    weights: &LossWeights,
) -> Result<LossParts> {
    let mut g = Graph::new();
    let f = g.constant(ex.features.clone());
    let r = g.constant(ex.x_cmag_ref.clone());
    let out = model.net.forward(&mut g, &model.params, f, r)?;
    let vars = total_loss(&mut g, &out, &ex.targets, weights, &model.cfg().stft)?;
    let parts = vars.values(&g);
    if !parts.is_finite() {
        return Err(Error::NonFiniteLoss {
            item: ex.id.clone(),
            detail: format!("{parts:?}"),
        });
    }
    g.backward_into(vars.total, &mut model.params)?;
    Ok(parts)
}

/// Mean SI-SDR of the model's output over `items`.
pub fn mean_si_sdr<T: Real>(model: &Model<T>, items: &[MixtureItem]) -> Result<f64> {
    let mut sum = 0.0;
    for item in items {
        let it = item.for_mics(model.cfg().n_mics)?;
        let est = model.enhance(&it.noisy)?;
        sum += si_sdr(&it.clean_ref, &est)?;
    }
    Ok(sum / items.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossParts,
    pub val_si_sdr: Option<f64>,
    pub wall_seconds: f64,
    pub steps: usize,
    pub improved: bool,
}

pub struct Trainer {
    pub model: Model<f32>,
    pub cfg: TrainConfig,
    opt: AdamW,
    rng: ChaCha8Rng,
    best_val: Option<f64>,
    run_dir: Option<PathBuf>,
    run_config: Option<serde_json::Value>,
    last_grad_norm: f64,
}

impl Trainer {
    pub fn new(model: Model<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(&model.params, cfg.betas, cfg.eps, cfg.weight_decay);
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            model,
            cfg,
            opt,
            best_val: None,
            run_dir: None,
            run_config: None,
            last_grad_norm: 0.0,
        })
    }

    /// Enables the JSON-lines log and checkpoints under `dir`.
    pub fn with_run_dir(
        mut self,
        dir: impl AsRef<Path>,
        run_config: Option<serde_json::Value>,
    ) -> Result<Self> {
        std::fs::create_dir_all(dir.as_ref())?;
        self.run_dir = Some(dir.as_ref().to_path_buf());
        self.run_config = run_config;
        Ok(self)
    }

    pub fn best_val(&self) -> Option<f64> {
        self.best_val
    }

    /// Gradient norm of the latest step, before clipping.
    pub fn last_grad_norm(&self) -> f64 {
        self.last_grad_norm
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.opt.steps()
    }

    fn crop(&mut self, item: &MixtureItem) -> MixtureItem {
        match self.cfg.crop_seconds {
            Some(sec) => {
                let n = (sec * item.sample_rate as f64).round() as usize;
                if item.len() > n {
                    let start = self.rng.gen_range(0..=item.len() - n);
                    item.crop(start, n)
                } else {
                    item.clone()
                }
            }
            None => item.clone(),
        }
    }

    /// One optimizer update over `batch`; returns the batch-mean losses.
    pub fn train_step(&mut self, batch: &[&MixtureItem], epoch: usize) -> Result<LossParts> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        self.model.params.zero_grad();
        let mut mean = LossParts::default();
        for item in batch {
            let cropped = self.crop(item);
            let ex = prepare::<f32>(&cropped, self.model.cfg())?;
            let parts = accumulate_gradients(&mut self.model, &ex, &self.cfg.loss_weights)?;
            mean.add_scaled(&parts, 1.0 / batch.len() as f64);
        }
        if batch.len() > 1 {
            let s = 1.0 / batch.len() as f32;
            for p in self.model.params.iter_mut() {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
            }
        }
        let norm = match self.cfg.clip_grad_norm {
            Some(c) => clip_grad_norm(&mut self.model.params, c),
            None => self.model.params.grad_norm(),
        };
        if !norm.is_finite() {
            let ids: Vec<&str> = batch.iter().map(|i| i.id.as_str()).collect();
            return Err(Error::NonFiniteLoss {
                item: ids.join(","),
                detail: "gradient norm is not finite".into(),
            });
        }
        self.last_grad_norm = norm;
        self.opt.step(&mut self.model.params, self.cfg.lr_at(epoch));
        Ok(mean)
    }

    pub fn train_epoch(
        &mut self,
        train: &[MixtureItem],
        val: &[MixtureItem],
        epoch: usize,
    ) -> Result<EpochStats> {
        if train.is_empty() {
            return Err(Error::Manifest("training split is empty".into()));
        }
        let start = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut loss = LossParts::default();
        let mut steps = 0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&MixtureItem> = chunk.iter().map(|&i| &train[i]).collect();
            let parts = self.train_step(&batch, epoch)?;
            loss.add_scaled(&parts, 1.0);
            steps += 1;
        }
        loss = {
            let mut m = LossParts::default();
            m.add_scaled(&loss, 1.0 / steps as f64);
            m
        };
        let val_si_sdr = if val.is_empty() {
            None
        } else {
            Some(mean_si_sdr(&self.model, val)?)
        };
        let improved = match (val_si_sdr, self.best_val) {
            (Some(v), Some(b)) => v > b,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            self.best_val = val_si_sdr;
        }
        let stats = EpochStats {
            epoch,
            lr: self.cfg.lr_at(epoch),
            loss,
            val_si_sdr,
            wall_seconds: start.elapsed().as_secs_f64(),
            steps,
            improved,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (mag {:.4}, phase {:.4}, complex {:.4}, time {:.4}), val si-sdr {:?}, {:.1}s",
            loss.total,
            loss.mag,
            loss.phase,
            loss.complex,
            loss.time,
            val_si_sdr,
            stats.wall_seconds
        );
        if let Some(dir) = &self.run_dir {
            save_checkpoint(&self.model, dir.join("last.ckpt"), self.run_config.clone())?;
            if improved {
                save_checkpoint(&self.model, dir.join("best.ckpt"), self.run_config.clone())?;
            }
            let record = serde_json::json!({
                "epoch": stats.epoch,
                "lr": stats.lr,
                "loss": stats.loss,
                "val_si_sdr": stats.val_si_sdr,
                "wall_seconds": stats.wall_seconds,
            });
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join("train_log.jsonl"))?;
            writeln!(f, "{record}")?;
        }
        Ok(stats)
    }

    /// Runs `cfg.epochs` epochs.
    pub fn fit(&mut self, train: &[MixtureItem], val: &[MixtureItem]) -> Result<Vec<EpochStats>> {
        (0..self.cfg.epochs)
            .map(|e| self.train_epoch(train, val, e))
            .collect()
    }
}
