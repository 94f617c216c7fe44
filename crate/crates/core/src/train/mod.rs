//! Optimisers, learning-rate schedule, checkpoints and the training loop.
//!
//! A run is a pure function of its configuration and seed. Epoch `e` visits
//! the training set in an order drawn from `(seed, e)`, and sample `i` of
//! epoch `e` is augmented with a generator seeded from `(seed, e, i)`, so a
//! resumed run needs nothing beyond the step count to continue exactly where
//! it stopped.

mod checkpoint;
mod optim;
mod schedule;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, TrainState, MAGIC, VERSION};
pub use optim::{clip_grad_norm, OptimConfig, OptimKind, Optimizer};
pub use schedule::PolySchedule;

use crate::autodiff::Tape;
use crate::config::RunConfig;
use crate::data::{augment, batch, Augment, Sample};
use crate::error::{Error, Result};
use crate::loss::LossKind;
use crate::metrics::{binarize, dsc, iou, mask_of, EvalResult, ImageScore};
use crate::model::{forward, infer, ModelConfig};
use crate::nn::Ctx;
use crate::tensor::ParameterStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    /// Polynomial decay exponent.
    pub lr_power: f64,
    /// Random rescale and crop of every training sample.
    pub augment: bool,
    pub crop: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Global gradient-norm bound; unset means no clipping.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_grad: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 8,
            loss: LossKind::Bce,
            lr_power: 0.9,
            augment: false,
            crop: 256,
            scale_min: 0.7,
            scale_max: 2.0,
            clip_grad: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.lr_power > 0.0
            && self.crop > 0
            && self.scale_min > 0.0
            && self.scale_min <= self.scale_max
            && self.clip_grad.is_none_or(|c| c > 0.0);
        if !ok {
            return Err(Error::Config(format!("invalid training settings: {self:?}")));
        }
        Ok(())
    }
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    /// Steps completed, counting this one.
    pub step: usize,
    pub lr: f64,
    pub train_loss: f32,
    pub val_dsc: Option<f64>,
    pub val_iou: Option<f64>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator seed for `(seed, epoch, index)`.
pub fn derive_seed(seed: u64, epoch: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ epoch) ^ index)
}

pub struct Trainer {
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub augment: Augment,
    pub seed: u64,
    pub config_hash: u32,
    pub train_set: Vec<Sample>,
    pub val_set: Vec<Sample>,
    pub state: TrainState,
    pub schedule: PolySchedule,
}

impl Trainer {
    /// A fresh run with parameters initialised from `seed`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: ModelConfig,
        config: TrainConfig,
        optim: OptimConfig,
        augment: Augment,
        seed: u64,
        config_hash: u32,
        train_set: Vec<Sample>,
        val_set: Vec<Sample>,
    ) -> Result<Self> {
        config.validate()?;
        optim.validate()?;
        if train_set.is_empty() || val_set.is_empty() {
            return Err(Error::Config("training and validation sets must be non-empty".into()));
        }
        let c = model.encoder.in_channels;
        if let Some(s) = train_set.iter().chain(&val_set).find(|s| s.channels() != c) {
            return Err(Error::Data(format!("{}: {} channels, model expects {c}", s.id, s.channels())));
        }
        let params = model.init(seed)?;
        let steps_per_epoch = train_set.len().div_ceil(config.batch_size);
        let schedule = PolySchedule {
            base_lr: optim.lr,
            total_steps: steps_per_epoch * config.epochs,
            power: config.lr_power,
        };
        let state = TrainState {
            optimizer: Optimizer::new(optim, &params),
            params,
            step: 0,
            best_val_dsc: -1.0,
        };
        Ok(Trainer {
            model,
            config,
            augment,
            seed,
            config_hash,
            train_set,
            val_set,
            state,
            schedule,
        })
    }

    /// A fresh run of `cfg` on its training and validation sets.
    pub fn from_config(cfg: &RunConfig, config_hash: u32) -> Result<Self> {
        let data = cfg.datasets()?;
        Trainer::new(
            cfg.model_config()?,
            cfg.train.clone(),
            cfg.optim.clone(),
            cfg.augment(),
            cfg.seed,
            config_hash,
            data.train,
            data.val,
        )
    }

    /// Replaces the freshly initialised state with one read from a
    /// checkpoint.
    pub fn resume(&mut self, ck: &Checkpoint) -> Result<()> {
        let optim = self.state.optimizer.config.clone();
        self.state = ck.state(self.config_hash, &self.state.params, optim)?;
        Ok(())
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train_set.len().div_ceil(self.config.batch_size)
    }

    pub fn total_steps(&self) -> usize {
        self.schedule.total_steps
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    /// The (augmented) samples of step `step`.
    pub fn batch_for(&self, step: usize) -> Result<Vec<Sample>> {
        let spe = self.steps_per_epoch();
        let (epoch, pos) = (step / spe, step % spe);
        let mut order: Vec<usize> = (0..self.train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, epoch as u64, u64::MAX)));
        let bs = self.config.batch_size;
        order[pos * bs..((pos + 1) * bs).min(order.len())]
            .iter()
            .map(|&i| {
                let s = &self.train_set[i];
                if self.config.augment {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, epoch as u64, i as u64));
                    augment(s, &mut rng, &self.augment)
                } else {
                    Ok(s.clone())
                }
            })
            .collect()
    }

    /// One optimisation step. Returns the loss before the update.
    pub fn step(&mut self) -> Result<LogRow> {
        let step = self.state.step;
        let fail = |e: Error| Error::Training {
            step,
            message: e.to_string(),
        };
        let (images, masks) = batch(&self.batch_for(step)?)?;
        let lr = self.schedule.lr(step);
        let params = &mut self.state.params;
        params.zero_grads();
        let loss = {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, params);
            let out = forward(&ctx, &self.model, tape.constant(images)).map_err(fail)?;
            let loss = self.config.loss.compute(out.logits, &masks).map_err(fail)?;
            let value = loss.item()?;
            let grads = tape.backward(loss).map_err(fail)?;
            grads.accumulate_into(params)?;
            value
        };
        if let Some(max) = self.config.clip_grad {
            clip_grad_norm(params, max);
        }
        self.state.optimizer.step(params, lr).map_err(fail)?;
        self.state.step += 1;
        Ok(LogRow {
            step: self.state.step,
            lr,
            train_loss: loss,
            val_dsc: None,
            val_iou: None,
        })
    }

    pub fn evaluate(&self, samples: &[Sample]) -> Result<EvalResult> {
        evaluate(&self.model, &self.state.params, samples)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_state(self.config_hash, &self.state)
    }

    /// Trains to the end of the schedule. At the end of every epoch the
    /// validation set is scored and, when `out` is given, `last.ckpt`,
    /// `best.ckpt` and `log.csv` are written there. `on_row` sees every log
    /// row as it is produced.
    pub fn run(&mut self, out: Option<&Path>, mut log: Vec<LogRow>, mut on_row: impl FnMut(&LogRow)) -> Result<Vec<LogRow>> {
        let spe = self.steps_per_epoch();
        while !self.is_done() {
            let mut row = self.step()?;
            if self.state.step % spe == 0 || self.is_done() {
                let val = self.evaluate(&self.val_set)?;
                row.val_dsc = Some(val.dsc);
                row.val_iou = Some(val.iou);
                let improved = val.dsc > self.state.best_val_dsc;
                if improved {
                    self.state.best_val_dsc = val.dsc;
                }
                if let Some(dir) = out {
                    let ck = self.checkpoint();
                    ck.save(&dir.join("last.ckpt"))?;
                    if improved {
                        ck.save(&dir.join("best.ckpt"))?;
                    }
                }
            }
            on_row(&row);
            log.push(row);
            if let (Some(dir), Some(_)) = (out, log.last().and_then(|r| r.val_dsc)) {
                write_log(&dir.join("log.csv"), &log)?;
            }
        }
        Ok(log)
    }
}

/// Per-image DSC and IoU with predictions thresholded at logit 0.
pub fn evaluate(model: &ModelConfig, params: &ParameterStore<f32>, samples: &[Sample]) -> Result<EvalResult> {
    let mut scores = Vec::with_capacity(samples.len());
    for s in samples {
        let (image, mask) = batch(std::slice::from_ref(s))?;
        let logits = infer(model, params, &image)?.logits;
        let (pred, target) = (binarize(logits.data()), mask_of(mask.data()));
        scores.push(ImageScore {
            id: s.id.clone(),
            dsc: dsc(&pred, &target),
            iou: iou(&pred, &target),
        });
    }
    EvalResult::from_scores(scores)
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(err)?;
    r.deserialize().map(|row| row.map_err(err)).collect()
}
