//! End-to-end training under MSE with Adam, plus evaluation loops.
//!
//! Every random draw comes from a stream keyed by what it is for:
//! shuffling by epoch, augmentation by `(epoch, sample)` and dropout by
//! `(optimizer step, batch position)`. No generator state survives between
//! steps, so a checkpoint plus the data order fully determines the future.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport};
use crate::model::{AgeScaler, ModelConfig, TriameseModel, TriameseParams};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng::{purpose, stream};
use crate::vit::ForwardMode;
use crate::volume::{augment, load_volume, AugmentConfig, DatasetManifest, Split, Volume};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecaySchedule {
    /// `lr / (1 + decay · step)` with `step` counting optimizer updates.
    #[default]
    PerStep,
    /// The same law with `step` replaced by the completed epoch count.
    PerEpoch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub decay_schedule: DecaySchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// L2 coefficient added to gradients as `weight_decay · θ`.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Fit an affine age map on the training ages so the heads regress
    /// standardized targets.
    pub standardize_targets: bool,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            lr_decay: 1e-6,
            decay_schedule: DecaySchedule::PerStep,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 5e-4,
            batch_size: 100,
            epochs: 200,
            seed: 3407,
            standardize_targets: true,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Batch 8, translations scaled to a 28³ grid.
    pub fn desk() -> Self {
        Self {
            batch_size: 8,
            augment: AugmentConfig {
                max_translation_voxels: 3,
                ..AugmentConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("train.{name} must be > 0, got {v}")));
            }
        }
        for (name, v) in [("lr_decay", self.lr_decay), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("train.{name} must be >= 0, got {v}")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("train.{name} must lie in (0, 1), got {v}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        self.augment.validate()
    }

    /// Learning rate for the update after `step` prior updates in epoch `epoch`.
    pub fn lr_at(&self, step: u64, epoch: usize) -> f64 {
        let t = match self.decay_schedule {
            DecaySchedule::PerStep => step as f64,
            DecaySchedule::PerEpoch => epoch as f64,
        };
        self.learning_rate / (1.0 + self.lr_decay * t)
    }
}

/// Mean of squared residuals.
pub fn mse_loss(preds: &[f64], ages: &[f64]) -> Result<f64> {
    check_batch(preds, ages)?;
    Ok(preds.iter().zip(ages).map(|(p, a)| (p - a) * (p - a)).sum::<f64>() / preds.len() as f64)
}

/// `∂ mse / ∂ P_i = 2 (P_i − C_i) / n`.
pub fn mse_loss_grad(preds: &[f64], ages: &[f64]) -> Result<Vec<f64>> {
    check_batch(preds, ages)?;
    let n = preds.len() as f64;
    Ok(preds.iter().zip(ages).map(|(p, a)| 2.0 * (p - a) / n).collect())
}

fn check_batch(preds: &[f64], ages: &[f64]) -> Result<()> {
    if preds.len() != ages.len() {
        return Err(Error::dim("mse_loss", &[preds.len()], &[ages.len()]));
    }
    if preds.is_empty() {
        return Err(Error::Contract("mse_loss on an empty batch".into()));
    }
    Ok(())
}

/// Adam moments, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first: TriameseParams<Tensor<f32>>,
    pub second: TriameseParams<Tensor<f32>>,
    /// Updates applied so far.
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &TriameseParams<Tensor<f32>>) -> Self {
        Self {
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
        }
    }
}

/// Scalar hyperparameters of one Adam update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamHyper {
    pub fn from_config(cfg: &TrainConfig, lr: f64) -> Self {
        Self {
            lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }
}

/// Bias-corrected Adam on flat buffers; `t` is the 1-based update count.
pub fn adam_update(theta: &mut [f32], grad: &[f32], m: &mut [f32], v: &mut [f32], t: u64, h: AdamHyper) {
    let bc1 = 1.0 - h.beta1.powf(t as f64);
    let bc2 = 1.0 - h.beta2.powf(t as f64);
    for i in 0..theta.len() {
        let th = f64::from(theta[i]);
        let g = f64::from(grad[i]) + h.weight_decay * th;
        let mi = h.beta1 * f64::from(m[i]) + (1.0 - h.beta1) * g;
        let vi = h.beta2 * f64::from(v[i]) + (1.0 - h.beta2) * g * g;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let update = h.lr * (mi / bc1) / ((vi / bc2).sqrt() + h.eps);
        theta[i] = (th - update) as f32;
    }
}

/// One Adam step over every parameter. `grads` are in canonical leaf order.
pub fn adam_step(
    params: &mut TriameseParams<Tensor<f32>>,
    grads: &[Tensor<f32>],
    state: &mut OptimizerState,
    hyper: AdamHyper,
) -> Result<()> {
    let names = params.names();
    let mut thetas = params.leaves_mut();
    let mut ms = state.first.leaves_mut();
    let mut vs = state.second.leaves_mut();
    if grads.len() != thetas.len() || ms.len() != thetas.len() || vs.len() != thetas.len() {
        return Err(Error::dim("adam_step", &[thetas.len()], &[grads.len(), ms.len(), vs.len()]));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != thetas[i].shape() {
            return Err(Error::dim("adam_step", thetas[i].shape(), g.shape()));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite { param: names[i].clone() });
        }
    }
    let t = state.step + 1;
    for i in 0..thetas.len() {
        adam_update(
            thetas[i].data_mut(),
            grads[i].data(),
            ms[i].data_mut(),
            vs[i].data_mut(),
            t,
            hyper,
        );
        if !thetas[i].all_finite() {
            return Err(Error::NonFinite { param: names[i].clone() });
        }
    }
    state.step = t;
    Ok(())
}

/// A volume with its target age.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub path: String,
    pub volume: Volume,
    pub age: f64,
}

/// Loads every record of `split`.
pub fn load_split(manifest: &DatasetManifest, split: Split) -> Result<Vec<Sample>> {
    manifest
        .split(split)
        .into_iter()
        .map(|r| {
            Ok(Sample {
                path: r.path.clone(),
                volume: load_volume(manifest.resolve(r))?,
                age: r.age,
            })
        })
        .collect()
}

/// Squared error of the training objective and gradients for one sample,
/// already divided by the batch length.
fn sample_gradients(
    model: &TriameseModel<f32>,
    volume: &Volume,
    age: f64,
    batch_len: usize,
    dropout_seed: (u64, u64, u64),
) -> Result<(f64, Vec<Tensor<f32>>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let (seed, step, pos) = dropout_seed;
    let mut rng = stream(seed, &[purpose::DROPOUT, step, pos]);
    let out = model.forward(&mut tape, &bound, volume, ForwardMode::TRAIN, &mut rng)?;
    let target = tape.constant(Tensor::full([1, 1], age as f32));
    let squared = |tape: &mut Tape<f32>, p: Var| -> Result<Var> {
        let d = tape.sub(p, target)?;
        tape.mul(d, d)
    };
    let (loss, weight) = match out.fused {
        Some(fused) => (squared(&mut tape, fused)?, 1.0),
        None => {
            // independent views: average their objectives
            let [x, y, z] = out.views;
            let (sx, sy, sz) = (squared(&mut tape, x)?, squared(&mut tape, y)?, squared(&mut tape, z)?);
            let sxy = tape.add(sx, sy)?;
            (tape.add(sxy, sz)?, 1.0 / 3.0)
        }
    };
    let sq_err = f64::from(tape.value(loss).data()[0]) * weight;
    let loss = tape.scale(loss, (weight / batch_len as f64) as f32);
    let mut grads = tape.backward(loss)?;
    let grads = bound.leaves().into_iter().map(|&v| grads.take(v)).collect();
    Ok((sq_err, grads))
}

/// Per-epoch log row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mae: f64,
    pub val_r: Option<f64>,
    pub val_rp: Option<f64>,
    pub lr: f64,
}

pub fn write_epoch_log(rows: &[EpochLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?;
    w.write_record(["epoch", "train_mse", "val_mae", "val_r", "val_rp", "lr"])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_epoch_log(path: impl AsRef<Path>) -> Result<Vec<EpochLog>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .collect::<std::result::Result<Vec<EpochLog>, _>>()
        .map_err(Into::into)
}

/// Prediction for one evaluated sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePrediction {
    pub path: String,
    pub age: f64,
    pub pred: f64,
    pub views: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    /// MAE of each view's own prediction.
    pub view_mae: [f64; 3],
    pub predictions: Vec<SamplePrediction>,
}

impl Evaluation {
    /// `path,age,pred,bag` table.
    pub fn write_predictions(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)?;
        w.write_record(["path", "age", "pred", "bag"])?;
        for p in &self.predictions {
            w.write_record([
                p.path.clone(),
                p.age.to_string(),
                p.pred.to_string(),
                (p.pred - p.age).abs().to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn per_view_mae(views: &[[f64; 3]], ages: &[f64]) -> Result<[f64; 3]> {
    let mut out = [0.0; 3];
    for (v, slot) in out.iter_mut().enumerate() {
        let preds: Vec<f64> = views.iter().map(|p| p[v]).collect();
        *slot = metrics::mae(&preds, ages)?;
    }
    Ok(out)
}

/// Eval-mode predictions and metrics. For best-view fusion the model must
/// already carry per-view validation MAE.
pub fn evaluate(model: &TriameseModel<f32>, samples: &[Sample], serial: bool) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty split".into()));
    }
    let predict = |s: &Sample| model.predict(&s.volume);
    let preds = if serial {
        samples.iter().map(predict).collect::<Result<Vec<_>>>()?
    } else {
        samples.par_iter().map(predict).collect::<Result<Vec<_>>>()?
    };
    let ages: Vec<f64> = samples.iter().map(|s| s.age).collect();
    let fused: Vec<f64> = preds.iter().map(|p| p.fused).collect();
    let views: Vec<[f64; 3]> = preds.iter().map(|p| p.views).collect();
    Ok(Evaluation {
        report: MetricsReport::compute(&fused, &ages)?,
        view_mae: per_view_mae(&views, &ages)?,
        predictions: samples
            .iter()
            .zip(&preds)
            .map(|(s, p)| SamplePrediction {
                path: s.path.clone(),
                age: s.age,
                pred: p.fused,
                views: p.views,
            })
            .collect(),
    })
}

/// Per-view predictions first, so best-view fusion can be scored on the
/// same pass that selects it.
fn validate_epoch(model: &mut TriameseModel<f32>, val: &[Sample], serial: bool) -> Result<Evaluation> {
    let views = |s: &Sample| model.predict_views(&s.volume);
    let view_preds = if serial {
        val.iter().map(views).collect::<Result<Vec<_>>>()?
    } else {
        val.par_iter().map(views).collect::<Result<Vec<_>>>()?
    };
    let ages: Vec<f64> = val.iter().map(|s| s.age).collect();
    model.view_val_mae = Some(per_view_mae(&view_preds, &ages)?);
    evaluate(model, val, serial)
}

/// Drives training epoch by epoch.
pub struct Trainer {
    pub model: TriameseModel<f32>,
    pub optimizer: OptimizerState,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_mae: Option<f64>,
    pub best: Option<Checkpoint>,
    pub log: Vec<EpochLog>,
    pub serial: bool,
    train: Vec<Sample>,
    val: Vec<Sample>,
}

impl Trainer {
    pub fn new(model_config: ModelConfig, config: TrainConfig, train: Vec<Sample>, val: Vec<Sample>) -> Result<Self> {
        config.validate()?;
        Self::check_splits(&train, &val)?;
        let mut model = TriameseModel::<f32>::init(model_config, config.seed)?;
        if config.standardize_targets {
            let ages: Vec<f64> = train.iter().map(|s| s.age).collect();
            model.scaler = AgeScaler::fit(&ages);
        }
        let optimizer = OptimizerState::new(&model.params);
        Ok(Self {
            model,
            optimizer,
            config,
            epoch: 0,
            best_val_mae: None,
            best: None,
            log: Vec::new(),
            serial: false,
            train,
            val,
        })
    }

    /// Continues from `checkpoint`; `config` may extend the epoch budget.
    pub fn resume(checkpoint: Checkpoint, train: Vec<Sample>, val: Vec<Sample>) -> Result<Self> {
        Self::check_splits(&train, &val)?;
        checkpoint.train.validate()?;
        Ok(Self {
            model: checkpoint.model,
            optimizer: checkpoint.optimizer,
            config: checkpoint.train,
            epoch: checkpoint.epoch,
            best_val_mae: checkpoint.best_val_mae,
            best: None,
            log: Vec::new(),
            serial: false,
            train,
            val,
        })
    }

    fn check_splits(train: &[Sample], val: &[Sample]) -> Result<()> {
        if train.is_empty() {
            return Err(Error::Contract("training split is empty".into()));
        }
        if val.is_empty() {
            return Err(Error::Contract("validation split is empty".into()));
        }
        Ok(())
    }

    pub fn with_serial(mut self, serial: bool) -> Self {
        self.serial = serial;
        self
    }

    pub fn train_samples(&self) -> &[Sample] {
        &self.train
    }

    pub fn val_samples(&self) -> &[Sample] {
        &self.val
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            train: self.config.clone(),
            epoch: self.epoch,
            best_val_mae: self.best_val_mae,
        }
    }

    /// Training order for `epoch` (0-based).
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut stream(self.config.seed, &[purpose::SHUFFLE, epoch as u64]));
        order
    }

    /// Forward, backward and one Adam update on the given training indices.
    /// Returns the summed squared error of the batch in years².
    pub fn train_step(&mut self, batch: &[usize], epoch: usize) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let step = self.optimizer.step;
        let model = &self.model;
        let cfg = &self.config;
        let train = &self.train;
        let work = |(pos, &idx): (usize, &usize)| -> Result<(f64, Vec<Tensor<f32>>)> {
            let sample = train.get(idx).ok_or_else(|| {
                Error::Contract(format!("sample index {idx} out of range ({} samples)", train.len()))
            })?;
            let mut aug_rng = stream(cfg.augment.rng_seed, &[purpose::AUGMENT, epoch as u64, idx as u64]);
            let volume = augment(&sample.volume, &cfg.augment, &mut aug_rng);
            sample_gradients(model, &volume, sample.age, batch.len(), (cfg.seed, step, pos as u64))
        };
        let results = if self.serial {
            batch.iter().enumerate().map(work).collect::<Result<Vec<_>>>()?
        } else {
            batch.par_iter().enumerate().map(work).collect::<Result<Vec<_>>>()?
        };

        // fixed reduction order keeps parallel and serial runs identical
        let mut results = results.into_iter();
        let (mut sq_sum, mut total) = results.next().expect("non-empty batch");
        for (sq, grads) in results {
            sq_sum += sq;
            for (acc, g) in total.iter_mut().zip(&grads) {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
        }
        let lr = self.config.lr_at(step, epoch);
        adam_step(
            &mut self.model.params,
            &total,
            &mut self.optimizer,
            AdamHyper::from_config(&self.config, lr),
        )?;
        Ok(sq_sum)
    }

    /// One full epoch followed by validation.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let epoch = self.epoch;
        let order = self.epoch_order(epoch);
        let mut sq_sum = 0.0;
        let mut lr = self.config.lr_at(self.optimizer.step, epoch);
        for batch in order.chunks(self.config.batch_size) {
            lr = self.config.lr_at(self.optimizer.step, epoch);
            sq_sum += self.train_step(batch, epoch)?;
        }
        let train_mse = sq_sum / order.len() as f64;
        let eval = validate_epoch(&mut self.model, &self.val, self.serial)?;
        self.epoch += 1;
        let row = EpochLog {
            epoch: self.epoch,
            train_mse,
            val_mae: eval.report.mae,
            val_r: eval.report.r,
            val_rp: eval.report.rp,
            lr,
        };
        if self.best_val_mae.is_none_or(|b| eval.report.mae < b) {
            self.best_val_mae = Some(eval.report.mae);
            self.best = Some(self.checkpoint());
        }
        self.log.push(row.clone());
        Ok(row)
    }

    /// Runs until `config.epochs` epochs have completed.
    pub fn run(&mut self) -> Result<&[EpochLog]> {
        while self.epoch < self.config.epochs {
            self.run_epoch()?;
        }
        Ok(&self.log)
    }
}

/// Trains from scratch and returns the final checkpoint, the best-validation
/// checkpoint and the epoch log.
pub fn train(
    model_config: ModelConfig,
    config: TrainConfig,
    train: Vec<Sample>,
    val: Vec<Sample>,
    serial: bool,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model_config, config, train, val)?.with_serial(serial);
    trainer.run()?;
    let last = trainer.checkpoint();
    Ok(TrainOutcome {
        best: trainer.best.take().unwrap_or_else(|| last.clone()),
        last,
        log: trainer.log,
    })
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub log: Vec<EpochLog>,
}
