use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{adamw_step, lr_at_epoch, OptimizerState, TrainConfig};
use crate::data::{horizontal_flip, make_batches, Batch, BatchOptions, PoseKind, Sequence, SequencePair};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_report, total_loss, EvalPair, LossConfig, MetricOptions, MetricsReport, Point};
use crate::model::{checkpoint, Model, ModelConfig};
use crate::tensor::{Tape, Tensor};

/// Loss components of one batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub total: f64,
    pub position: f64,
    pub velocity: f64,
}

/// Loss and per-parameter gradients for one batch. With `update_stats`, the
/// batch statistics of every batch-norm layer are folded into the running buffers.
pub fn compute_gradients(
    model: &mut Model<f32>,
    batch: &Batch,
    loss_cfg: &LossConfig,
    train_batch_norm: bool,
    update_stats: bool,
) -> Result<(StepLoss, BTreeMap<String, Tensor<f32>>)> {
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, true);
    let x = tape.constant(batch.input.clone());
    let y = tape.constant(batch.target.clone());
    let trace = model.forward(&mut tape, &bound, x, train_batch_norm)?;
    let terms = total_loss(&mut tape, trace.output, y, loss_cfg)?;
    let value = |v| tape.value(v).item().map_or(f64::NAN, |s: f32| s as f64);
    let loss = StepLoss { total: value(terms.total), position: value(terms.position), velocity: value(terms.velocity) };
    if update_stats && train_batch_norm {
        model.update_running_stats(&tape, &trace);
    }
    let vars: Vec<(String, _)> = bound.params().map(|(k, v)| (k.clone(), v)).collect();
    let mut grads = tape.backward(terms.total)?;
    let out = vars
        .into_iter()
        .map(|(k, v)| {
            let g = grads.take(v).expect("parameters are gradient leaves");
            (k, g)
        })
        .collect();
    Ok((loss, out))
}

/// One pass over `batches` at learning rate `lr`. Returns the mean total loss.
pub fn train_epoch(
    model: &mut Model<f32>,
    batches: &[Batch],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let mut sum = 0.0;
    for (step, batch) in batches.iter().enumerate() {
        let (loss, grads) = compute_gradients(model, batch, &cfg.loss, !cfg.freeze_batch_norm, true)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, step });
        }
        adamw_step(model.params_mut(), &grads, state, lr, cfg)?;
        sum += loss.total;
    }
    Ok(sum / batches.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub tta_flip: bool,
    pub metrics: MetricOptions,
    pub batch_size: usize,
}

impl EvalOptions {
    pub fn new(cfg: &ModelConfig, tta_flip: bool) -> Self {
        Self {
            tta_flip,
            metrics: MetricOptions { root: cfg.skeleton.root, alignment: Default::default() },
            batch_size: 16,
        }
    }
}

/// Eval-mode prediction for a batch of windows `[B, T, J, 3]`, optionally
/// averaged with the un-flipped prediction of the flipped input.
pub fn predict_windows(model: &Model<f32>, input: &Tensor<f32>, tta_flip: bool) -> Result<Tensor<f32>> {
    let direct = model.predict(input)?;
    if !tta_flip {
        return Ok(direct);
    }
    let spec = &model.config().skeleton;
    let as_seq = |t: &Tensor<f32>, kind| {
        let j = spec.joint_count();
        Sequence::new(kind, 1.0, j, t.data().to_vec())
    };
    let flipped_in = horizontal_flip(&as_seq(input, PoseKind::TwoD)?, spec)?;
    let flipped_in = Tensor::new(input.shape().to_vec(), flipped_in.into_data())?;
    let back = model.predict(&flipped_in)?;
    let back = horizontal_flip(&as_seq(&back, PoseKind::ThreeD)?, spec)?;
    let data = direct.data().iter().zip(back.data()).map(|(a, b)| 0.5 * (a + b)).collect();
    Tensor::new(direct.shape().to_vec(), data)
}

/// Predicts every non-overlapping window of every sequence and aggregates
/// metrics against the root-centered targets.
pub fn evaluate(model: &Model<f32>, dataset: &[SequencePair], opts: &EvalOptions) -> Result<MetricsReport> {
    let cfg = model.config();
    let batch_opts =
        BatchOptions { batch_size: opts.batch_size, window: cfg.frames, train: false, flip_probability: 0.0, seed: 0 };
    let batches = make_batches(dataset, &cfg.skeleton, &batch_opts)?;
    let mut preds: Vec<Vec<Point>> = vec![Vec::new(); dataset.len()];
    let mut gts: Vec<Vec<Point>> = vec![Vec::new(); dataset.len()];
    let row = cfg.frames * cfg.joints() * 3;
    for batch in &batches {
        let out = predict_windows(model, &batch.input, opts.tta_flip)?;
        for (i, w) in batch.windows.iter().enumerate() {
            let p = &out.data()[i * row..(i + 1) * row];
            let g = &batch.target.data()[i * row..(i + 1) * row];
            preds[w.sequence].extend(p.chunks(3).map(|c| [c[0] as f64, c[1] as f64, c[2] as f64]));
            gts[w.sequence].extend(g.chunks(3).map(|c| [c[0] as f64, c[1] as f64, c[2] as f64]));
        }
    }
    let pairs: Vec<EvalPair> =
        dataset.iter().enumerate().map(|(i, s)| EvalPair { pred: &preds[i], gt: &gts[i], action: &s.action }).collect();
    aggregate_report(&pairs, cfg.joints(), &opts.metrics)
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_p1: f64,
    pub eval_p2: f64,
    pub eval_accel: f64,
}

pub const LOG_HEADER: &str = "epoch,lr,train_loss,eval_p1,eval_p2,eval_accel";

pub fn log_csv(rows: &[EpochLog]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.epoch, r.lr, r.train_loss, r.eval_p1, r.eval_p2, r.eval_accel);
    }
    s
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    pub best: Model<f32>,
    pub best_epoch: usize,
    /// Metrics of the freshly initialized model.
    pub initial: MetricsReport,
    pub best_metrics: MetricsReport,
    pub log: Vec<EpochLog>,
}

/// Machine-readable run summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub best_epoch: usize,
    pub initial: MetricsReport,
    pub best: MetricsReport,
    pub final_train_loss: f64,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(epoch as u64 + 1)
}

/// Trains from a seeded initialization, evaluating after every epoch and
/// keeping the parameters with the lowest P1 on `eval_set`.
pub fn train_run(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &[SequencePair],
    eval_set: &[SequencePair],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train_set.is_empty() || eval_set.is_empty() {
        return Err(Error::Empty("training and evaluation sets must be nonempty"));
    }
    let mut model = Model::<f32>::new(model_cfg.clone(), cfg.seed)?;
    let mut eval_opts = EvalOptions::new(model_cfg, cfg.tta_flip);
    eval_opts.metrics.alignment = cfg.alignment;
    eval_opts.batch_size = cfg.batch_size;
    let initial = evaluate(&model, eval_set, &eval_opts)?;
    let mut state = OptimizerState::default();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best = (model.clone(), 0, initial.clone());
    let mut best_p1 = f64::INFINITY;
    for epoch in 0..cfg.epochs {
        let opts = BatchOptions {
            batch_size: cfg.batch_size,
            window: model_cfg.frames,
            train: true,
            flip_probability: if cfg.flip_augment { 0.5 } else { 0.0 },
            seed: epoch_seed(cfg.seed, epoch),
        };
        let batches = make_batches(train_set, &model_cfg.skeleton, &opts)?;
        let lr = lr_at_epoch(epoch, cfg);
        let train_loss = train_epoch(&mut model, &batches, &mut state, lr, cfg, epoch)?;
        let report = evaluate(&model, eval_set, &eval_opts)?;
        log.push(EpochLog {
            epoch,
            lr,
            train_loss,
            eval_p1: report.mpjpe_mm,
            eval_p2: report.p_mpjpe_mm,
            eval_accel: report.accel_err_mm,
        });
        if report.mpjpe_mm < best_p1 {
            best_p1 = report.mpjpe_mm;
            best = (model.clone(), epoch, report);
        }
    }
    let (best_model, best_epoch, best_metrics) = best;
    Ok(TrainOutcome { model, best: best_model, best_epoch, initial, best_metrics, log })
}

impl TrainOutcome {
    /// Writes `best.ckpt`, `last.ckpt`, `train_log.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path, cfg: &TrainConfig) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut meta = BTreeMap::new();
        meta.insert("epoch".to_string(), serde_json::json!(self.best_epoch));
        meta.insert("eval_p1".to_string(), serde_json::json!(self.best_metrics.mpjpe_mm));
        checkpoint::save(&self.best, meta, &dir.join("best.ckpt"))?;
        let mut meta = BTreeMap::new();
        meta.insert("epoch".to_string(), serde_json::json!(self.log.len().saturating_sub(1)));
        checkpoint::save(&self.model, meta, &dir.join("last.ckpt"))?;
        fs::write(dir.join("train_log.csv"), log_csv(&self.log))?;
        let summary = RunSummary {
            model: self.model.config().clone(),
            train: cfg.clone(),
            best_epoch: self.best_epoch,
            initial: self.initial.clone(),
            best: self.best_metrics.clone(),
            final_train_loss: self.log.last().map_or(f64::NAN, |r| r.train_loss),
        };
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
        Ok(())
    }
}
