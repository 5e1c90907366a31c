//! Mini-batch training of fusion and head parameters.
//!
//! Every sample of a batch gets its own graph. Samples are processed in
//! fixed-size chunks on the rayon pool and the chunk gradients are summed in
//! chunk order, so results do not depend on the number of threads.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Graph, Mode, NodeId, ParamStore};
use crate::data::{Dataset, Split, TaskKind};
use crate::error::{Error, Result};
use crate::fusion::{Strategy, TAU_MAX, TAU_MIN};
use crate::metrics::{accuracy, argmax, spearman, MetricKind, MetricsReport};
use crate::model::{ArchConfig, FusionModel, ModelConfig};
use crate::seed::{derive, stream};
use crate::tensor::Tensor;

const CHUNK: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub lambda_entropy: f64,
    pub seed: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    /// Fraction of the train split held out for validation when the
    /// manifest has no `val` samples.
    pub val_fraction: f64,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Mil,
            lambda_entropy: 0.0,
            seed: 0,
            learning_rate: 3e-5,
            weight_decay: 1e-5,
            batch_size: 32,
            max_epochs: 500,
            early_stop_patience: 20,
            plateau_patience: 5,
            plateau_factor: 0.5,
            val_fraction: 0.1,
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("learning_rate", self.learning_rate)?;
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay {} must be non-negative",
                self.weight_decay
            )));
        }
        if !(self.lambda_entropy.is_finite() && self.lambda_entropy >= 0.0) {
            return Err(Error::Config(format!(
                "lambda_entropy {} must be non-negative",
                self.lambda_entropy
            )));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("early_stop_patience", self.early_stop_patience),
            ("plateau_patience", self.plateau_patience),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be a positive integer")));
            }
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config(format!(
                "plateau_factor {} outside (0, 1)",
                self.plateau_factor
            )));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction {} outside (0, 1)",
                self.val_fraction
            )));
        }
        self.arch.validate()
    }

    pub fn model_config(&self, dataset: &Dataset) -> ModelConfig {
        ModelConfig {
            strategy: self.strategy,
            arch: self.arch.clone(),
            dims: dataset.dims,
            task: dataset.task,
            outputs: dataset.outputs(),
        }
    }
}

// -------------------------------------------------------------------------
// Loss
// -------------------------------------------------------------------------

/// One sample's share of the batch loss: `(task + λ·H) / batch_len`.
///
/// Summed over a batch this is the mean task loss plus `λ` times the mean
/// attention entropy. Regression uses squared error on a single output;
/// classification uses softmax cross-entropy over the logits.
pub fn sample_loss(
    g: &mut Graph<'_>,
    pred: NodeId,
    target: f64,
    entropy: Option<NodeId>,
    lambda: f64,
    task: TaskKind,
    batch_len: usize,
) -> Result<NodeId> {
    let task_loss = match task {
        TaskKind::Regression => {
            let y = g.constant(Tensor::full(g.shape(pred), target));
            let d = g.sub(pred, y)?;
            let sq = g.mul(d, d)?;
            g.sum(sq, None)?
        }
        TaskKind::Classification => {
            let classes = g.value(pred).numel();
            let class = target as usize;
            if target < 0.0 || target.fract() != 0.0 || class >= classes {
                return Err(Error::ClassOutOfRange { class, classes });
            }
            let p = g.softmax(pred, Axis::Cols)?;
            let p = g.slice(p, Axis::Cols, class, 1)?;
            let lp = g.log(p)?;
            let lp = g.sum(lp, None)?;
            g.scale(lp, -1.0)?
        }
    };
    let total = match entropy {
        Some(h) if lambda != 0.0 => {
            let h = g.scale(h, lambda)?;
            g.add(task_loss, h)?
        }
        _ => task_loss,
    };
    g.scale(total, 1.0 / batch_len as f64)
}

// -------------------------------------------------------------------------
// Optimizer and scheduler
// -------------------------------------------------------------------------

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates per parameter plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Decoupled weight decay followed by a bias-corrected Adam update using the
/// gradients held in `store`. Fails before touching any value if a gradient
/// is not finite.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64, weight_decay: f64) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for &id in &ids {
        if !store.grad(id).all_finite() {
            return Err(Error::NonFiniteGradient {
                param: store.name(id).to_string(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for id in ids {
        let i = id.index();
        let grad = store.grad(id).clone();
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let p = store.value_mut(id).data_mut();
        for (k, &gk) in grad.data().iter().enumerate() {
            p[k] *= 1.0 - lr * weight_decay;
            m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * gk;
            v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * gk * gk;
            p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Multiplies the learning rate by `factor` once the monitored metric
/// (higher is better) has not improved for `patience` consecutive epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub patience: usize,
    pub factor: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(patience: usize, factor: f64) -> Self {
        Self {
            patience,
            factor,
            best: f64::NEG_INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn step(&mut self, metric: f64, lr: f64) -> f64 {
        if metric > self.best {
            self.best = metric;
            self.bad_epochs = 0;
            return lr;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.patience {
            self.bad_epochs = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}

fn clamp_temperature(store: &mut ParamStore) {
    if let Some(id) = store.id("gate.tau") {
        for v in store.value_mut(id).data_mut() {
            *v = v.clamp(TAU_MIN, TAU_MAX);
        }
    }
}

// -------------------------------------------------------------------------
// Inference
// -------------------------------------------------------------------------

/// Eval-mode outputs for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    pub index: usize,
    pub pred: Vec<f64>,
    /// Attention rows: one row per sequence, or one per valid position.
    pub alpha_rows: Option<Vec<[f64; 3]>>,
    pub entropy: Option<f64>,
}

impl SampleOutput {
    /// Mean of the attention rows.
    pub fn alpha_mean(&self) -> Option<[f64; 3]> {
        self.alpha_rows.as_ref().map(|rows| mean_rows(rows))
    }
}

fn mean_rows(rows: &[[f64; 3]]) -> [f64; 3] {
    let mut acc = [0.0; 3];
    for r in rows {
        for m in 0..3 {
            acc[m] += r[m];
        }
    }
    acc.map(|a| a / rows.len() as f64)
}

fn alpha_rows(alpha: &Tensor, mask: Option<&[bool]>) -> Vec<[f64; 3]> {
    (0..alpha.rows())
        .filter(|&r| mask.is_none_or(|m| m[r]))
        .map(|r| [alpha.at(r, 0), alpha.at(r, 1), alpha.at(r, 2)])
        .collect()
}

/// Runs the model in eval mode over `indices`, padding within batches of
/// `batch_size` exactly as during training.
pub fn predict(
    model: &FusionModel,
    store: &ParamStore,
    dataset: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<Vec<SampleOutput>> {
    let batches = dataset.batches(indices, batch_size, None)?;
    let jobs: Vec<(usize, usize)> = batches
        .iter()
        .flat_map(|b| b.indices.iter().map(move |&i| (i, b.t_prime)))
        .collect();
    jobs.par_iter()
        .map(|&(i, t_prime)| {
            let mut g = Graph::with_params(store, Mode::Eval, 0);
            let out = model.forward(&mut g, &dataset.samples[i].tracks, Some(t_prime))?;
            Ok(SampleOutput {
                index: i,
                pred: g.value(out.pred).data().to_vec(),
                alpha_rows: out.alpha.map(|a| alpha_rows(g.value(a), out.alpha_mask.as_deref())),
                entropy: out.entropy.map(|h| g.value(h).item()),
            })
        })
        .collect()
}

/// Spearman (regression) or accuracy (classification) of `outputs`.
pub fn score(dataset: &Dataset, outputs: &[SampleOutput], split: &str) -> Result<MetricsReport> {
    let labels: Vec<f64> = outputs.iter().map(|o| dataset.samples[o.index].label).collect();
    let (metric, value) = match dataset.task {
        TaskKind::Regression => {
            let preds: Vec<f64> = outputs.iter().map(|o| o.pred[0]).collect();
            (MetricKind::Spearman, spearman(&preds, &labels)?)
        }
        TaskKind::Classification => {
            let preds: Vec<usize> = outputs.iter().map(|o| argmax(&o.pred)).collect();
            let targets: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
            (MetricKind::Accuracy, accuracy(&preds, &targets)?)
        }
    };
    Ok(MetricsReport {
        metric,
        value,
        count: outputs.len(),
        split: split.to_string(),
    })
}

/// Mean squared error of single-output predictions.
pub fn mse(dataset: &Dataset, outputs: &[SampleOutput]) -> f64 {
    outputs
        .iter()
        .map(|o| (o.pred[0] - dataset.samples[o.index].label).powi(2))
        .sum::<f64>()
        / outputs.len() as f64
}

/// Train and validation indices. The manifest's `val` split is used when
/// present; otherwise a seeded `val_fraction` of the train split (at least
/// two samples) is held out.
pub fn split_indices(dataset: &Dataset, config: &TrainConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    let train = dataset.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    let val = dataset.indices(Split::Val);
    if !val.is_empty() {
        return Ok((train, val));
    }
    let n_val = ((train.len() as f64 * config.val_fraction).round() as usize).max(2);
    if n_val >= train.len() {
        return Err(Error::EmptySplit(format!(
            "train (only {} samples, cannot hold out {n_val} for validation)",
            train.len()
        )));
    }
    let mut order = train;
    order.shuffle(&mut stream(config.seed, "validation-split"));
    let mut val = order[..n_val].to_vec();
    let mut rest = order[n_val..].to_vec();
    val.sort_unstable();
    rest.sort_unstable();
    Ok((rest, val))
}

// -------------------------------------------------------------------------
// Training loop
// -------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub lr: f64,
    pub mean_entropy: Option<f64>,
    pub alpha_dna: Option<f64>,
    pub alpha_rna: Option<f64>,
    pub alpha_protein: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StopReason {
    MaxEpochs,
    EarlyStopped { epoch: usize },
    NonFiniteGradient { epoch: usize, param: String },
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StopReason::MaxEpochs => f.write_str("reached max_epochs"),
            StopReason::EarlyStopped { epoch } => write!(f, "early stop after epoch {epoch}"),
            StopReason::NonFiniteGradient { epoch, param } => {
                write!(f, "aborted in epoch {epoch}: non-finite gradient for `{param}`")
            }
        }
    }
}

/// Parameters and optimizer state at the end of one epoch.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub epoch: usize,
    pub metric: f64,
    pub params: ParamStore,
    pub adam: AdamState,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub model: FusionModel,
    pub log: Vec<EpochLog>,
    /// Highest validation metric; `None` only if no epoch completed.
    pub best: Option<Snapshot>,
    pub final_params: ParamStore,
    pub final_adam: AdamState,
    pub stop: StopReason,
}

struct StepOutput {
    grads: Vec<Option<Tensor>>,
    loss: f64,
    entropy: Option<f64>,
    alpha: Option<[f64; 3]>,
}

#[allow(clippy::too_many_arguments)]
fn run_sample(
    model: &FusionModel,
    store: &ParamStore,
    dataset: &Dataset,
    config: &TrainConfig,
    index: usize,
    t_prime: usize,
    batch_len: usize,
    dropout_seed: u64,
    grads: &mut [Option<Tensor>],
) -> Result<(f64, Option<f64>, Option<[f64; 3]>)> {
    let sample = &dataset.samples[index];
    let mut g = Graph::with_params(store, Mode::Train, dropout_seed);
    let out = model.forward(&mut g, &sample.tracks, Some(t_prime))?;
    let loss = sample_loss(
        &mut g,
        out.pred,
        sample.label,
        out.entropy,
        config.lambda_entropy,
        dataset.task,
        batch_len,
    )?;
    g.backward(loss)?;
    for (id, grad) in g.param_grads() {
        match &mut grads[id.index()] {
            Some(acc) => acc.add_assign(grad),
            slot => *slot = Some(grad.clone()),
        }
    }
    let alpha = out
        .alpha
        .map(|a| mean_rows(&alpha_rows(g.value(a), out.alpha_mask.as_deref())));
    Ok((g.value(loss).item(), out.entropy.map(|h| g.value(h).item()), alpha))
}

/// Trains a fresh model on `dataset`.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainRun> {
    train_with(dataset, config, |_| {})
}

/// Like [`train`], calling `on_epoch` after every logged epoch.
pub fn train_with(dataset: &Dataset, config: &TrainConfig, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainRun> {
    config.validate()?;
    let (train_idx, val_idx) = split_indices(dataset, config)?;
    let (model, mut store) = FusionModel::new(config.model_config(dataset), &mut stream(config.seed, "init"))?;
    let mut adam = AdamState::new(&store);
    let mut scheduler = PlateauScheduler::new(config.plateau_patience, config.plateau_factor);
    let mut lr = config.learning_rate;
    let mut log = Vec::new();
    let mut best: Option<Snapshot> = None;
    let mut stop = StopReason::MaxEpochs;

    'epochs: for epoch in 1..=config.max_epochs {
        let batches = dataset.batches(
            &train_idx,
            config.batch_size,
            Some(derive(config.seed, &[0, epoch as u64])),
        )?;
        let mut loss_sum = 0.0;
        let mut entropies = Vec::new();
        let mut alphas = Vec::new();
        for batch in &batches {
            let b = batch.indices.len();
            let chunks: Vec<Result<StepOutput>> = batch
                .indices
                .par_chunks(CHUNK)
                .map(|chunk| {
                    let mut out = StepOutput {
                        grads: vec![None; store.len()],
                        loss: 0.0,
                        entropy: None,
                        alpha: None,
                    };
                    let mut ent = Vec::new();
                    let mut alp = Vec::new();
                    for &i in chunk {
                        let seed = derive(config.seed, &[1, epoch as u64, i as u64]);
                        let (l, h, a) = run_sample(
                            &model,
                            &store,
                            dataset,
                            config,
                            i,
                            batch.t_prime,
                            b,
                            seed,
                            &mut out.grads,
                        )?;
                        out.loss += l;
                        ent.extend(h);
                        alp.extend(a);
                    }
                    // Per-sample values are carried through the chunk as sums.
                    out.entropy = (!ent.is_empty()).then(|| ent.iter().sum());
                    out.alpha = (!alp.is_empty()).then(|| {
                        let mut s = [0.0; 3];
                        for a in &alp {
                            for m in 0..3 {
                                s[m] += a[m];
                            }
                        }
                        s
                    });
                    Ok(out)
                })
                .collect();
            store.zero_grads();
            for chunk in chunks {
                let chunk = chunk?;
                let ids: Vec<_> = store.ids().collect();
                for (id, gk) in ids.into_iter().zip(&chunk.grads) {
                    if let Some(gk) = gk {
                        store.accumulate(id, gk)?;
                    }
                }
                loss_sum += chunk.loss * b as f64;
                entropies.extend(chunk.entropy);
                alphas.extend(chunk.alpha);
            }
            match adam_step(&mut store, &mut adam, lr, config.weight_decay) {
                Ok(()) => clamp_temperature(&mut store),
                Err(Error::NonFiniteGradient { param }) => {
                    stop = StopReason::NonFiniteGradient { epoch, param };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }

        let outputs = predict(&model, &store, dataset, &val_idx, config.batch_size)?;
        let val_metric = match score(dataset, &outputs, "val") {
            Ok(r) => r.value,
            Err(Error::UndefinedCorrelation) => 0.0,
            Err(e) => return Err(e),
        };
        let n = train_idx.len() as f64;
        let alpha_mean = (!alphas.is_empty()).then(|| {
            let mut s = [0.0; 3];
            for a in &alphas {
                for m in 0..3 {
                    s[m] += a[m];
                }
            }
            s.map(|v| v / n)
        });
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / n,
            val_metric,
            lr,
            mean_entropy: (!entropies.is_empty()).then(|| entropies.iter().sum::<f64>() / n),
            alpha_dna: alpha_mean.map(|a| a[0]),
            alpha_rna: alpha_mean.map(|a| a[1]),
            alpha_protein: alpha_mean.map(|a| a[2]),
        };
        on_epoch(&entry);
        log.push(entry);

        if best.as_ref().is_none_or(|s| val_metric > s.metric) {
            best = Some(Snapshot {
                epoch,
                metric: val_metric,
                params: store.clone(),
                adam: adam.clone(),
            });
        }
        lr = scheduler.step(val_metric, lr);
        let best_epoch = best.as_ref().map_or(0, |s| s.epoch);
        if epoch - best_epoch >= config.early_stop_patience {
            stop = StopReason::EarlyStopped { epoch };
            break;
        }
    }

    Ok(TrainRun {
        config: config.clone(),
        model,
        log,
        best,
        final_params: store,
        final_adam: adam,
        stop,
    })
}

/// Writes the epoch log as CSV. Missing values are left empty.
pub fn write_log_csv(path: impl AsRef<Path>, log: &[EpochLog]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
