//! Training: soft-label cross-entropy, AdamW with a warmup schedule and a
//! seeded epoch loop.

mod optim;
mod run;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::augment::{cutmix, CutMixConfig, LabeledImage};
use crate::config::{parse_value, KeyValue};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng;
use crate::tensor::{Graph, ParamStore, Real};

pub use optim::{AdamW, AdamWConfig};
pub use run::{
    best_checkpoint_path, fit_image, prepare_data, run_training, PreparedData, RunOutputs, EFFECTIVE_CONFIG_FILE,
    HISTORY_FILE,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Schedule {
    #[default]
    Cosine,
    Constant,
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::Cosine => "cosine",
            Schedule::Constant => "constant",
        })
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Schedule::Cosine),
            "constant" => Ok(Schedule::Constant),
            _ => Err(Error::Config(format!("unknown schedule `{s}` (cosine|constant)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub schedule: Schedule,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Probability that a training sample is replaced by a CutMix of itself
    /// and a random partner.
    pub cutmix_prob: f64,
    pub cutmix_alpha: f64,
    /// Images per inference batch during evaluation.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 256,
            epochs: 100,
            warmup_epochs: 5,
            schedule: Schedule::Cosine,
            seed: 42,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            cutmix_prob: 0.5,
            cutmix_alpha: 1.0,
            eval_batch_size: 128,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.eval_batch_size == 0 {
            return bad("batch_size, eval_batch_size and epochs must be at least 1".into());
        }
        if self.warmup_epochs > self.epochs {
            return bad(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("betas must lie in [0, 1) and adam_eps must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.cutmix_prob) {
            return bad(format!("cutmix_prob must lie in [0, 1], got {}", self.cutmix_prob));
        }
        CutMixConfig {
            alpha: self.cutmix_alpha,
            seed: self.seed,
        }
        .validate()
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

impl KeyValue for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "lr" => self.lr = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse_value(key, value)?,
            "schedule" => self.schedule = value.parse()?,
            "seed" => self.seed = parse_value(key, value)?,
            "beta1" => self.beta1 = parse_value(key, value)?,
            "beta2" => self.beta2 = parse_value(key, value)?,
            "adam_eps" => self.adam_eps = parse_value(key, value)?,
            "cutmix_prob" => self.cutmix_prob = parse_value(key, value)?,
            "cutmix_alpha" => self.cutmix_alpha = parse_value(key, value)?,
            "eval_batch_size" => self.eval_batch_size = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("schedule", self.schedule.to_string()),
            ("seed", self.seed.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("cutmix_prob", self.cutmix_prob.to_string()),
            ("cutmix_alpha", self.cutmix_alpha.to_string()),
            ("eval_batch_size", self.eval_batch_size.to_string()),
        ]
    }
}

/// Learning rate for `epoch`: a linear ramp `lr * (epoch + 1) / warmup`
/// during warmup, then `lr * (1 + cos(pi * t)) / 2` with `t` running from 0
/// at the end of warmup towards 1 at the last epoch (or flat `lr` for the
/// constant schedule).
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let w = cfg.warmup_epochs;
    if epoch < w {
        return cfg.lr * (epoch + 1) as f64 / w as f64;
    }
    match cfg.schedule {
        Schedule::Constant => cfg.lr,
        Schedule::Cosine => {
            let span = (cfg.epochs - w).max(1) as f64;
            let t = (epoch - w) as f64 / span;
            cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

impl EpochRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain record serialises")
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    /// Parameters at the best validation epoch (earliest on ties).
    pub best_params: ParamStore<T>,
}

/// Accuracy and per-image probabilities on a labelled set, without gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub probabilities: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

pub fn evaluate<T: Real>(model: &Model<T>, samples: &[LabeledImage], batch: usize) -> Result<Evaluation> {
    let images: Vec<&_> = samples.iter().map(|s| &s.image).collect();
    let probabilities = model.predict(&images, batch)?;
    let labels: Vec<usize> = samples.iter().map(LabeledImage::dominant_class).collect();
    let correct = probabilities
        .iter()
        .zip(&labels)
        .filter(|(p, &l)| crate::augment::argmax(p) == l)
        .count();
    Ok(Evaluation {
        accuracy: if samples.is_empty() { 0.0 } else { correct as f64 / samples.len() as f64 },
        probabilities,
        labels,
    })
}

/// Training sample for one batch slot: either the original or a CutMix with
/// a random partner, drawn from the item's own substream.
fn prepare_item(train: &[LabeledImage], idx: usize, cfg: &TrainConfig, epoch: usize, slot: usize) -> Result<LabeledImage> {
    let key = ((epoch as u64) << 32) | slot as u64;
    let mut r = rng::substream(cfg.seed, "cutmix", key);
    if cfg.cutmix_prob > 0.0 && r.random::<f64>() < cfg.cutmix_prob {
        let partner = r.random_range(0..train.len());
        let mix = CutMixConfig {
            alpha: cfg.cutmix_alpha,
            seed: cfg.seed,
        };
        Ok(cutmix(&train[idx], &train[partner], &mix, &mut r)?.mixed)
    } else {
        Ok(train[idx].clone())
    }
}

/// Runs one optimisation step on a batch; returns the batch loss.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    opt: &mut AdamW,
    batch: &[LabeledImage],
    lr: f64,
    dropout_rng: Option<&mut rng::Stream>,
) -> Result<f64> {
    let b = batch.len();
    let k = model.config().num_classes;
    let images: Vec<&_> = batch.iter().map(|s| &s.image).collect();
    let rows = model.patch_rows(&images)?;
    let targets: Vec<T> = batch
        .iter()
        .flat_map(|s| s.label.iter().map(|&p| T::from_f64_lossy(p)))
        .collect();
    if targets.len() != b * k {
        return Err(Error::shape("train_step", &[b, k], &[targets.len()]));
    }
    let mut g = Graph::new();
    let p = model.params().bind(&mut g);
    let x = g.constant(vec![b * model.config().num_patches(), model.embed().input_elements()], rows)?;
    let logits = model.forward(&mut g, &p, x, b, dropout_rng)?;
    let loss = g.cross_entropy_soft(logits, &targets)?;
    let value = g.scalar_value(loss).to_f64_lossy();
    if !value.is_finite() {
        return Ok(value);
    }
    g.backward(loss)?;
    let params = model.params_mut();
    params.zero_grad();
    params.accumulate_grads(&g, &p);
    opt.step(params, lr);
    Ok(value)
}

/// Seeded training loop. `on_epoch` sees each record as soon as it is
/// complete, together with the model and whether this epoch is the best so
/// far.
pub fn train<T: Real>(
    model: &mut Model<T>,
    train_set: &[LabeledImage],
    val_set: &[LabeledImage],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &Model<T>, bool) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let mut opt = AdamW::new(cfg.adamw(), model.params());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore<T>)> = None;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng::substream(cfg.seed, "shuffle", epoch as u64));
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let start = bi * cfg.batch_size;
            let batch = chunk
                .par_iter()
                .enumerate()
                .map(|(j, &idx)| prepare_item(train_set, idx, cfg, epoch, start + j))
                .collect::<Result<Vec<_>>>()?;
            let mut drop_rng = rng::substream(cfg.seed, "dropout", ((epoch as u64) << 32) | bi as u64);
            let loss = train_step(model, &mut opt, &batch, lr, Some(&mut drop_rng))?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    loss,
                });
            }
            loss_sum += loss * chunk.len() as f64;
        }
        let train_acc = evaluate(model, train_set, cfg.eval_batch_size)?.accuracy;
        let val_acc = if val_set.is_empty() {
            train_acc
        } else {
            evaluate(model, val_set, cfg.eval_batch_size)?.accuracy
        };
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc,
            val_acc,
        };
        let is_best = best.as_ref().is_none_or(|(_, acc, _)| val_acc > *acc);
        if is_best {
            best = Some((epoch, val_acc, model.params().clone()));
        }
        on_epoch(&record, model, is_best)?;
        history.push(record);
    }
    let (best_epoch, best_val_acc, best_params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_acc,
        best_params,
    })
}
