//! Optimization loop: Adam on mini-batch MSE, reduce-on-plateau learning
//! rate, early stopping on validation loss and best-checkpoint selection.

mod gradcheck;
mod optim;

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use gradcheck::{check_gradients, gradient_check, random_weights, relative_error, GradCheckReport, REL_FLOOR};
pub use optim::{Adam, EarlyStopping, Plateau};

use crate::data::ForecastSample;
use crate::error::{Error, Result};
use crate::forecaster::Model;
use crate::graph::Graph;
use crate::layers::Mode;
use crate::tensor::Tensor;

pub const TRAIN_FORMAT: i64 = 1;

fn default_format() -> i64 {
    TRAIN_FORMAT
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_format")]
    pub format: i64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_learning_rate: f64,
    /// Epochs without validation improvement before stopping; `0` disables.
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Overrides the model's dropout rate when set.
    pub dropout: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            format: TRAIN_FORMAT,
            learning_rate: 5e-4,
            batch_size: 8,
            plateau_factor: 0.5,
            plateau_patience: 5,
            min_learning_rate: 1e-6,
            early_stop_patience: 15,
            max_epochs: 200,
            seed: 0,
            dropout: None,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)
            .map_err(|e| Error::ConfigList { count: 1, errors: vec![format!("train config: {}", e.message())] })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if self.format != TRAIN_FORMAT {
            errors.push(format!("unsupported `format` {}, expected {TRAIN_FORMAT}", self.format));
        }
        for (key, v) in [("learning_rate", self.learning_rate), ("min_learning_rate", self.min_learning_rate)] {
            if !(v > 0.0 && v.is_finite()) {
                errors.push(format!("`{key}` must be positive, got {v}"));
            }
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            errors.push(format!("`plateau_factor` must lie in (0, 1), got {}", self.plateau_factor));
        }
        for (key, v) in
            [("batch_size", self.batch_size), ("plateau_patience", self.plateau_patience), ("max_epochs", self.max_epochs)]
        {
            if v == 0 {
                errors.push(format!("`{key}` must be at least 1"));
            }
        }
        if let Some(d) = self.dropout {
            if !(0.0..1.0).contains(&d) {
                errors.push(format!("`dropout` must lie in [0, 1), got {d}"));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigList { count: errors.len(), errors })
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// Model holding the parameters of the best validation epoch.
    pub model: Model,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Mean squared error over all elements.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() || pred.is_empty() {
        return Err(Error::shape("mse_loss", format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    if !target.is_finite() {
        return Err(Error::NonFinite { stage: "loss target".into() });
    }
    Ok(pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64)
}

fn target_of(s: &ForecastSample) -> Result<&Tensor> {
    s.target.as_ref().ok_or_else(|| Error::Empty("sample has no target".into()))
}

/// Distinct, reproducible dropout stream per (run, epoch, batch, sample).
fn dropout_seed(seed: u64, epoch: usize, batch: usize, index: usize) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [epoch as u64, batch as u64, index as u64] {
        h = (h ^ v).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h
}

/// Loss and parameter gradients for one sample.
pub fn sample_gradient(model: &Model, sample: &ForecastSample, mode: Mode, seed: u64) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let out = model.forward_nodes(&mut g, sample, mode, seed)?;
    let loss = g.mse(out.prediction, target_of(sample)?)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).data()[0], g.param_grads(&grads, &model.params)))
}

/// Mean eval-mode MSE (unclipped) over `samples`.
pub fn evaluate_loss(model: &Model, samples: &[ForecastSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("no samples to evaluate".into()));
    }
    let losses: Vec<f64> = samples
        .par_iter()
        .enumerate()
        .map(|(index, s)| {
            let pred = model.forward(s, Mode::Eval, 0).map_err(|e| Error::Sample { index, source: Box::new(e) })?;
            mse_loss(&pred, target_of(s)?)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// One optimizer step on a batch: per-sample graphs run in parallel, the
/// gradients are then summed in sample order so results do not depend on
/// thread scheduling. Returns the mean batch loss.
pub fn train_batch(model: &mut Model, opt: &mut Adam, batch: &[&ForecastSample], lr: f64, seeds: &[u64]) -> Result<f64> {
    let results: Vec<(f64, Vec<Tensor>)> =
        batch.par_iter().zip(seeds).map(|(s, &seed)| sample_gradient(model, s, Mode::Train, seed)).collect::<Result<_>>()?;
    let n = results.len() as f64;
    let mut total: Vec<Tensor> = model.params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
    let mut loss = 0.0;
    for (l, grads) in &results {
        loss += l;
        for (acc, g) in total.iter_mut().zip(grads) {
            acc.add_assign(g);
        }
    }
    let loss = loss / n;
    if !loss.is_finite() {
        return Ok(loss);
    }
    for t in &mut total {
        t.scale_assign(1.0 / n);
    }
    opt.step(&mut model.params, &total, lr);
    Ok(loss)
}

/// Train until `max_epochs` or early stopping and return the best model.
/// `on_epoch` sees every log record as soon as it is produced.
pub fn fit(
    mut model: Model,
    train: &[ForecastSample],
    validation: &[ForecastSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::Empty(format!(
            "training needs samples in both splits (train {}, validation {})",
            train.len(),
            validation.len()
        )));
    }
    for (index, s) in train.iter().chain(validation).enumerate() {
        model.config.dims.check_sample(s).map_err(|e| Error::Sample { index, source: Box::new(e) })?;
        target_of(s)?;
    }
    if let Some(d) = cfg.dropout {
        model.config.arch.dropout = d;
    }
    let mut opt = Adam::new(&model.params);
    let mut plateau = Plateau::new(cfg.plateau_factor, cfg.plateau_patience, cfg.min_learning_rate);
    let mut stopper = EarlyStopping::new((cfg.early_stop_patience > 0).then_some(cfg.early_stop_patience));
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut lr = cfg.learning_rate;
    let mut best = model.params.clone();
    let mut log = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&ForecastSample> = chunk.iter().map(|&i| &train[i]).collect();
            let seeds: Vec<u64> = (0..batch.len()).map(|i| dropout_seed(cfg.seed, epoch, b, i)).collect();
            let loss = train_batch(&mut model, &mut opt, &batch, lr, &seeds).map_err(|e| {
                if e.is_numerical() {
                    log::error!("epoch {epoch}, batch {b}: {e}");
                    Error::Diverged { epoch, batch: b, loss: f64::NAN }
                } else {
                    e
                }
            })?;
            if !loss.is_finite() || !model.params.all_finite() {
                return Err(Error::Diverged { epoch, batch: b, loss });
            }
            loss_sum += loss * batch.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_loss = evaluate_loss(&model, validation)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch, batch: 0, loss: val_loss });
        }
        let record = EpochRecord { epoch, train_loss, val_loss, lr, seconds: start.elapsed().as_secs_f64() };
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6} lr {lr:.2e}");
        on_epoch(&record);
        log.push(record);

        let (improved, stop) = stopper.observe(epoch, val_loss);
        if improved {
            best = model.params.clone();
        }
        lr = plateau.observe(val_loss, lr);
        if stop {
            log::info!("early stop after epoch {epoch}; best epoch {}", stopper.best_epoch);
            break;
        }
    }
    model.params = best;
    Ok(FitOutcome { model, log, best_epoch: stopper.best_epoch, best_val_loss: stopper.best })
}
