//! Adam, the plateau learning-rate schedule and the two training loops.
//!
//! Every epoch visits the training set in an order drawn from the SplitMix64
//! stream `(shuffle_seed, epoch)`, in mini-batches of `batch_size` (the last
//! one may be short). After each epoch the model is scored on the eval set:
//! mean IoU for segmentation, accuracy for classification. That score drives
//! both the schedule and best-checkpoint selection (first epoch wins ties).
//!
//! The schedule keeps the best score seen so far. An epoch counts as an
//! improvement only if it beats that best by more than `min_delta`; otherwise a
//! stale counter grows, and when it reaches `patience` the rate is multiplied
//! by `factor` and the counter restarts.

use std::collections::BTreeSet;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{write_file, DatasetError};
use crate::labels::{to_schema, LabelError, LabelMap, LabelSchema};
use crate::metrics::{cls_report, iou_scores, merge_dense_prediction_for_sparse_scoring, MetricsError, SegConfusion};
use crate::model::{
    attach_cls_head, build_unet, cls_forward_with, is_head_param, seg_forward, stack_images, ClassifierConfig,
    ModelError, ModelWeights, UNetConfig,
};
use crate::phantom::{Diagnosis, Sample};
use crate::rng::SplitMix64;
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch} (lr {lr})")]
    NonFinite { epoch: usize, batch: usize, loss: f32, lr: f64 },
    #[error("architecture mismatch: pretrained weights are {found:?}, run expects {expected:?}")]
    Architecture { found: UNetConfig, expected: UNetConfig },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    /// Score on the held-out fold itself.
    #[default]
    Test,
    /// Score on groups held back from the training folds.
    Validation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_delta: f64,
    pub shuffle_seed: u64,
    pub freeze_seg_weights: bool,
    pub eval_split: EvalSplit,
    /// Share of training groups held back when `eval_split` is `validation`.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::segmentation()
    }
}

impl TrainConfig {
    pub fn segmentation() -> Self {
        Self {
            lr: 0.001,
            batch_size: 4,
            epochs: 50,
            plateau_factor: 0.5,
            plateau_patience: 5,
            min_delta: 1e-4,
            shuffle_seed: 0,
            freeze_seg_weights: false,
            eval_split: EvalSplit::Test,
            validation_fraction: 0.2,
        }
    }

    pub fn classification() -> Self {
        Self { epochs: 12, ..Self::segmentation() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!("plateau_factor must lie in (0, 1), got {}", self.plateau_factor));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.plateau_patience == 0 {
            return bad("plateau_patience must be at least 1".into());
        }
        if !(self.min_delta >= 0.0) {
            return bad(format!("min_delta must be non-negative, got {}", self.min_delta));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!("validation_fraction must lie in (0, 1), got {}", self.validation_fraction));
        }
        Ok(())
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    m: IndexMap<String, Vec<f32>>,
    v: IndexMap<String, Vec<f32>>,
}

/// One bias-corrected Adam update of every parameter named in `grads`.
pub fn adam_step(
    w: &mut ModelWeights,
    grads: &[(String, Tensor)],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    for (name, g) in grads {
        match w.get(name) {
            None => return Err(TrainError::Data(format!("gradient for unknown parameter `{name}`"))),
            Some(p) if p.shape() != g.shape() => {
                return Err(TrainError::Model(ModelError::ShapeMismatch {
                    name: name.clone(),
                    found: g.shape().to_vec(),
                    expected: p.shape().to_vec(),
                }))
            }
            Some(_) => {}
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let (b1, b2) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32);
    let grads: IndexMap<&str, &Tensor> = grads.iter().map(|(n, g)| (n.as_str(), g)).collect();
    for (name, p) in w.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![0.0; g.numel()]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![0.0; g.numel()]);
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m as f64 / c1;
            let v_hat = *v as f64 / c2;
            *p -= (lr * m_hat / (v_hat.sqrt() + ADAM_EPS)) as f32;
        }
    }
    Ok(())
}

/// Learning rate that drops when the monitored score stops improving.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    lr: f64,
    factor: f64,
    patience: usize,
    min_delta: f64,
    best: Option<f64>,
    stale: usize,
}

impl Plateau {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            factor: cfg.plateau_factor,
            patience: cfg.plateau_patience,
            min_delta: cfg.min_delta,
            best: None,
            stale: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Record one epoch's score; returns the rate for the next epoch.
    pub fn step(&mut self, metric: f64) -> f64 {
        match self.best {
            Some(best) if metric <= best + self.min_delta => {
                self.stale += 1;
                if self.stale >= self.patience {
                    self.lr *= self.factor;
                    self.stale = 0;
                }
            }
            _ => {
                self.best = Some(metric);
                self.stale = 0;
            }
        }
        self.lr
    }
}

/// Rate after replaying `metrics` through a fresh schedule.
pub fn plateau_scheduler(metrics: &[f64], cfg: &TrainConfig) -> f64 {
    let mut p = Plateau::new(cfg);
    for &m in metrics {
        p.step(m);
    }
    p.lr()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_metric: f64,
    /// Rate used during this epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub best_metric: f64,
}

impl TrainHistory {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), TrainError> {
        Ok(write_file(path, self.to_jsonl().as_bytes())?)
    }
}

/// Hold back roughly `fraction` of the groups (at least one, never all) for validation.
pub fn split_validation(samples: &[Sample], fraction: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>), TrainError> {
    let groups: Vec<&str> =
        samples.iter().map(|s| s.group_id.as_str()).collect::<BTreeSet<_>>().into_iter().collect();
    if groups.len() < 2 {
        return Err(TrainError::Data("validation split needs at least 2 groups".into()));
    }
    let mut order = groups.clone();
    SplitMix64::stream(seed, 0x7A11).shuffle(&mut order);
    let n_val = ((groups.len() as f64 * fraction).round() as usize).clamp(1, groups.len() - 1);
    let held: BTreeSet<&str> = order[..n_val].iter().copied().collect();
    let (val, train): (Vec<Sample>, Vec<Sample>) =
        samples.iter().cloned().partition(|s| held.contains(s.group_id.as_str()));
    Ok((train, val))
}

fn check_nonempty(train: &[Sample], eval: &[Sample]) -> Result<(), TrainError> {
    if train.is_empty() {
        return Err(TrainError::Data("training set is empty".into()));
    }
    if eval.is_empty() {
        return Err(TrainError::Data("evaluation set is empty".into()));
    }
    Ok(())
}

fn epoch_order(n: usize, cfg: &TrainConfig, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::stream(cfg.shuffle_seed, epoch as u64).shuffle(&mut order);
    order
}

fn batch_images(samples: &[Sample], idx: &[usize]) -> Result<Tensor, TrainError> {
    let imgs: Vec<_> = idx.iter().map(|&i| &samples[i].grey).collect();
    Ok(stack_images(&imgs)?)
}

/// Run the optimisation loop shared by both tasks. `step` builds the loss for
/// one batch on a fresh graph; `score` evaluates the current weights.
fn fit(
    mut w: ModelWeights,
    n_train: usize,
    cfg: &TrainConfig,
    mut step: impl FnMut(&mut Graph, &ModelWeights, &[usize]) -> Result<crate::tensor::Var, TrainError>,
    mut score: impl FnMut(&ModelWeights) -> Result<f64, TrainError>,
) -> Result<(ModelWeights, TrainHistory), TrainError> {
    let mut adam = AdamState::default();
    let mut sched = Plateau::new(cfg);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ModelWeights)> = None;
    for epoch in 1..=cfg.epochs {
        let lr = sched.lr();
        let order = epoch_order(n_train, cfg, epoch);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut g = Graph::new();
            let loss = step(&mut g, &w, idx).map_err(|e| match e {
                TrainError::Tensor(TensorError::NonFinite { .. }) => {
                    TrainError::NonFinite { epoch, batch: b + 1, loss: f32::NAN, lr }
                }
                e => e,
            })?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: b + 1, loss: value, lr });
            }
            loss_sum += value as f64 * idx.len() as f64;
            g.backward(loss)?;
            let grads = g.param_grads();
            adam_step(&mut w, &grads, &mut adam, lr)?;
        }
        let metric = score(&w)?;
        history.records.push(EpochRecord { epoch, train_loss: loss_sum / n_train as f64, eval_metric: metric, lr });
        if best.as_ref().map_or(true, |(b, _)| metric > *b) {
            best = Some((metric, w.clone()));
            history.best_epoch = epoch;
            history.best_metric = metric;
        }
        sched.step(metric);
    }
    Ok((best.expect("at least one epoch").1, history))
}

/// Per-pixel argmax of the model's logits, in input order.
pub fn predict_labels(w: &ModelWeights, samples: &[Sample], batch_size: usize) -> Result<Vec<LabelMap>, TrainError> {
    let schema = schema_of(w.unet_config())?;
    let mut out = Vec::with_capacity(samples.len());
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = batch_images(samples, chunk)?;
        let mut g = Graph::new();
        let logits = seg_forward(&mut g, w, &batch)?;
        let classes = g.value(logits).argmax_channels()?;
        let (h, wd) = samples[chunk[0]].grey.dims();
        for px in classes.chunks(h * wd) {
            out.push(LabelMap::new(schema, h, wd, px.iter().map(|&c| c as u8).collect())?);
        }
    }
    Ok(out)
}

/// Diagnosis probabilities, one row per sample.
pub fn predict_probabilities(w: &ModelWeights, samples: &[Sample], batch_size: usize) -> Result<Vec<[f32; 3]>, TrainError> {
    let mut out = Vec::with_capacity(samples.len());
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = batch_images(samples, chunk)?;
        let mut g = Graph::new();
        let p = cls_forward_with(&mut g, w, &batch, true)?;
        for row in g.value(p).data().chunks(3) {
            out.push([row[0], row[1], row[2]]);
        }
    }
    Ok(out)
}

pub fn predict_diagnoses(w: &ModelWeights, samples: &[Sample], batch_size: usize) -> Result<Vec<Diagnosis>, TrainError> {
    Ok(predict_probabilities(w, samples, batch_size)?
        .into_iter()
        .map(|p| {
            // Ties go to the lowest index.
            let best = (0..3).fold(0, |b, i| if p[i] > p[b] { i } else { b });
            Diagnosis::from_index(best).expect("three classes")
        })
        .collect())
}

pub fn schema_of(cfg: &UNetConfig) -> Result<LabelSchema, TrainError> {
    [LabelSchema::Dense, LabelSchema::Sparse]
        .into_iter()
        .find(|s| s.n_classes() == cfg.n_seg_classes)
        .ok_or_else(|| TrainError::Config(format!("no label schema has {} classes", cfg.n_seg_classes)))
}

/// Confusion over `samples` scored in `schema`. A dense model scored in the
/// sparse schema has its predictions merged first.
pub fn evaluate_segmentation(
    w: &ModelWeights,
    samples: &[Sample],
    schema: LabelSchema,
    batch_size: usize,
) -> Result<SegConfusion, TrainError> {
    let model_schema = schema_of(w.unet_config())?;
    let mut c = SegConfusion::new(schema);
    for (pred, s) in predict_labels(w, samples, batch_size)?.iter().zip(samples) {
        let pred = match (model_schema, schema) {
            (a, b) if a == b => pred.clone(),
            (LabelSchema::Dense, LabelSchema::Sparse) => merge_dense_prediction_for_sparse_scoring(pred)?,
            (found, expected) => return Err(TrainError::Label(LabelError::Schema { expected, found })),
        };
        c.add(&pred, &to_schema(&s.labels, schema)?)?;
    }
    Ok(c)
}

fn targets_in(samples: &[Sample], schema: LabelSchema) -> Result<Vec<Vec<usize>>, TrainError> {
    samples
        .iter()
        .map(|s| Ok(to_schema(&s.labels, schema)?.pixels().iter().map(|&p| p as usize).collect()))
        .collect()
}

/// Train a fresh U-Net for per-pixel labels in `arch`'s schema. Returns the
/// weights of the epoch with the best eval mean IoU.
pub fn train_segmentation(
    train: &[Sample],
    eval: &[Sample],
    arch: &UNetConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ModelWeights, TrainHistory), TrainError> {
    cfg.validate()?;
    check_nonempty(train, eval)?;
    let schema = schema_of(arch)?;
    let targets = targets_in(train, schema)?;
    // Fail on unconvertible eval labels before spending any time training.
    targets_in(eval, schema)?;
    let w = build_unet(arch, seed)?;
    fit(
        w,
        train.len(),
        cfg,
        |g, w, idx| {
            let batch = batch_images(train, idx)?;
            let logits = seg_forward(g, w, &batch)?;
            let probs = g.softmax_channels(logits)?;
            let t: Vec<usize> = idx.iter().flat_map(|&i| targets[i].iter().copied()).collect();
            Ok(g.cross_entropy(probs, &t)?)
        },
        |w| Ok(iou_scores(&evaluate_segmentation(w, eval, schema, cfg.batch_size)?)?.mean_iou),
    )
}

/// Train the diagnosis classifier. With `pretrained`, its segmentation weights
/// (minus any head) seed the network; otherwise the U-Net starts from `seed`.
/// A fresh head is attached either way. Returns the weights of the epoch with
/// the best eval accuracy.
pub fn train_classification(
    train: &[Sample],
    eval: &[Sample],
    arch: &UNetConfig,
    cfg: &TrainConfig,
    pretrained: Option<&ModelWeights>,
    seed: u64,
) -> Result<(ModelWeights, TrainHistory), TrainError> {
    cfg.validate()?;
    check_nonempty(train, eval)?;
    let base = match pretrained {
        Some(p) if p.unet_config() != arch => {
            return Err(TrainError::Architecture { found: *p.unet_config(), expected: *arch })
        }
        Some(p) => p.without_head(),
        None => build_unet(arch, seed)?,
    };
    let w = attach_cls_head(&base, &ClassifierConfig::for_unet(arch), seed)?;
    let diag: Vec<usize> = train.iter().map(|s| s.diagnosis.index()).collect();
    let freeze = cfg.freeze_seg_weights;
    fit(
        w,
        train.len(),
        cfg,
        |g, w, idx| {
            let batch = batch_images(train, idx)?;
            let probs = cls_forward_with(g, w, &batch, freeze)?;
            let t: Vec<usize> = idx.iter().map(|&i| diag[i]).collect();
            Ok(g.cross_entropy(probs, &t)?)
        },
        |w| {
            let preds = predict_diagnoses(w, eval, cfg.batch_size)?;
            let gts: Vec<Diagnosis> = eval.iter().map(|s| s.diagnosis).collect();
            Ok(cls_report(&preds, &gts)?.accuracy)
        },
    )
}

/// Names of the parameters a classification run updates.
pub fn trainable_params(w: &ModelWeights, freeze_seg_weights: bool) -> Vec<String> {
    w.iter().map(|(n, _)| n).filter(|n| !freeze_seg_weights || is_head_param(n)).map(String::from).collect()
}
