//! Optimizers, epoch loops and evaluation metrics for the generator and the
//! classifier.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{loaded_position, HeadType, Model};
use crate::style::{StyleMode, StyleSpec};
use crate::tensor::{no_grad, Float, Tensor};
use crate::text::{split_indices, TokenId, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adamw,
}

impl OptimizerKind {
    pub fn default_learning_rate(self) -> f64 {
        match self {
            OptimizerKind::Sgd => 0.1,
            OptimizerKind::Adamw => 3e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub split_ratio: f64,
    pub seed: u64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip_norm: Option<f64>,
    /// Stop after validation loss rises this many epochs in a row.
    pub patience: Option<usize>,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    /// Classifier only: train the head and leave the encoder fixed.
    pub freeze_backbone: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adamw,
            learning_rate: OptimizerKind::Adamw.default_learning_rate(),
            batch_size: 32,
            epochs: 20,
            split_ratio: 0.9,
            seed: 0,
            weight_decay: 0.01,
            grad_clip_norm: Some(1.0),
            patience: Some(3),
            max_steps: None,
            freeze_backbone: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bad.push(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            bad.push(format!("split_ratio {} must lie in (0, 1)", self.split_ratio));
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be positive".to_string());
        }
        if self.epochs == 0 {
            bad.push("epochs must be positive".to_string());
        }
        if self.weight_decay < 0.0 {
            bad.push("weight_decay must be non-negative".to_string());
        }
        if self.grad_clip_norm.is_some_and(|c| c <= 0.0) {
            bad.push("grad_clip_norm must be positive".to_string());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Param(bad.join("; ")))
        }
    }
}

fn grad_of(p: &Tensor, i: usize) -> Result<Vec<Float>> {
    p.grad()
        .ok_or_else(|| Error::contract(format!("parameter {i} has no gradient")))
}

/// `p ← p − lr·g` for every parameter.
pub fn sgd_step(params: &[Tensor], lr: f64) -> Result<()> {
    let grads = params
        .iter()
        .enumerate()
        .map(|(i, p)| grad_of(p, i))
        .collect::<Result<Vec<_>>>()?;
    for (p, g) in params.iter().zip(grads) {
        p.update(|d, _| {
            for (x, g) in d.iter_mut().zip(&g) {
                *x = (*x as f64 - lr * *g as f64) as Float;
            }
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWHyper {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamWHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Moment accumulators, one pair per parameter, plus the step count.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    /// Which parameters receive weight decay.
    pub decay: Vec<bool>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
            decay: vec![true; params.len()],
        }
    }

    /// Decay matrices and embeddings only; biases and norm gains are exempt.
    pub fn decay_matrices_only(mut self, params: &[Tensor]) -> Self {
        self.decay = params.iter().map(|p| p.shape().len() >= 2).collect();
        self
    }
}

/// Bias-corrected Adam update with decoupled weight decay.
pub fn adamw_step(params: &[Tensor], state: &mut AdamState, hp: &AdamWHyper) -> Result<()> {
    if state.m.len() != params.len()
        || params.iter().zip(&state.m).any(|(p, m)| m.len() != p.numel())
    {
        return Err(Error::contract("optimizer state does not match parameters"));
    }
    let grads = params
        .iter()
        .enumerate()
        .map(|(i, p)| grad_of(p, i))
        .collect::<Result<Vec<_>>>()?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let shrink = if state.decay[i] {
            1.0 - hp.lr * hp.weight_decay
        } else {
            1.0
        };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        p.update(|d, _| {
            for j in 0..d.len() {
                let g = g[j] as f64;
                m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g;
                v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g * g;
                let step = (m[j] / c1) / ((v[j] / c2).sqrt() + hp.eps);
                d[j] = (d[j] as f64 * shrink - hp.lr * step) as Float;
            }
        });
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd { lr: f64 },
    AdamW { hyper: AdamWHyper, state: AdamState },
}

impl Optimizer {
    pub fn new(cfg: &TrainConfig, params: &[Tensor]) -> Self {
        match cfg.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd {
                lr: cfg.learning_rate,
            },
            OptimizerKind::Adamw => Optimizer::AdamW {
                hyper: AdamWHyper::new(cfg.learning_rate, cfg.weight_decay),
                state: AdamState::new(params).decay_matrices_only(params),
            },
        }
    }

    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        match self {
            Optimizer::Sgd { lr } => sgd_step(params, *lr),
            Optimizer::AdamW { hyper, state } => adamw_step(params, state, hyper),
        }
    }
}

pub fn global_grad_norm(params: &[Tensor]) -> f64 {
    params
        .iter()
        .filter_map(Tensor::grad)
        .flat_map(|g| g.into_iter().map(|v| (v as f64) * (v as f64)))
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &[Tensor], max_norm: f64) -> f64 {
    let norm = global_grad_norm(params);
    if norm > max_norm {
        let factor = (max_norm / (norm + 1e-12)) as Float;
        params.iter().for_each(|p| p.scale_grad(factor));
    }
    norm
}

pub fn perplexity(mean_loss: f64) -> f64 {
    mean_loss.exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<MetricRecord>,
    pub config_hash: Option<String>,
}

pub const WALL_TIME: &str = "wall_time_s";

impl MetricsLog {
    pub fn push(&mut self, epoch: usize, split: &str, metric: &str, value: f64) {
        self.records.push(MetricRecord {
            epoch,
            split: split.to_string(),
            metric: metric.to_string(),
            value,
        });
    }

    pub fn get(&self, epoch: usize, split: &str, metric: &str) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.epoch == epoch && r.split == split && r.metric == metric)
            .map(|r| r.value)
    }

    /// Values of one metric in epoch order.
    pub fn series(&self, split: &str, metric: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.split == split && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    /// The log with timing entries removed, for run-to-run comparison.
    pub fn without_timing(&self) -> MetricsLog {
        MetricsLog {
            records: self
                .records
                .iter()
                .filter(|r| r.metric != WALL_TIME)
                .cloned()
                .collect(),
            config_hash: self.config_hash.clone(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        if let Some(h) = &self.config_hash {
            let _ = writeln!(s, "# config_hash: {h}");
        }
        s.push_str("epoch,split,metric,value\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{}", r.epoch, r.split, r.metric, r.value);
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

/// One formatted generator line with the style it was written in.
#[derive(Debug, Clone, PartialEq)]
pub struct LmExample {
    pub ids: Vec<TokenId>,
    pub style: StyleSpec,
}

/// One encoded title with its section label.
#[derive(Debug, Clone, PartialEq)]
pub struct ClfExample {
    pub ids: Vec<TokenId>,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: MetricsLog,
    pub steps: usize,
    pub epochs_run: usize,
    /// Epoch whose weights were kept (1-based).
    pub best_epoch: usize,
    pub best_value: f64,
}

/// Inputs, targets and styles for a batch, trimmed to its longest content.
type LmBatch = (Vec<Vec<TokenId>>, Vec<usize>, Vec<StyleSpec>);

fn lm_batch(model: &Model, batch: &[&LmExample]) -> Result<LmBatch> {
    let len = batch
        .iter()
        .map(|e| e.ids.iter().rposition(|&t| t != PAD).map_or(0, |p| p + 1))
        .max()
        .unwrap_or(0);
    if len < 2 {
        return Err(Error::Data("generator lines need at least two tokens".into()));
    }
    if len - 1 > model.config.max_seq {
        return Err(Error::Length {
            len: len - 1,
            max: model.config.max_seq,
        });
    }
    let mut inputs = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len() * (len - 1));
    for e in batch {
        let mut ids: Vec<TokenId> = e.ids.iter().copied().take(len).collect();
        ids.resize(len, PAD);
        targets.extend(ids[1..].iter().map(|&t| t as usize));
        ids.pop();
        inputs.push(ids);
    }
    let styles = batch.iter().map(|e| e.style).collect();
    Ok((inputs, targets, styles))
}

/// Mean next-token cross-entropy over the non-pad targets of a batch, and
/// the number of those targets.
pub fn lm_batch_loss(
    model: &Model,
    batch: &[&LmExample],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Tensor, usize)> {
    let (inputs, targets, styles) = lm_batch(model, batch)?;
    let refs: Vec<&[TokenId]> = inputs.iter().map(Vec::as_slice).collect();
    let styles = (model.config.style_mode != StyleMode::None).then_some(styles.as_slice());
    let logits = model.lm_logits(&refs, styles, rng.map(|r| r as &mut dyn rand::RngCore))?;
    let count = targets.iter().filter(|&&t| t != PAD as usize).count();
    let loss = logits.cross_entropy_mean(&targets, Some(PAD as usize))?;
    Ok((loss, count))
}

/// Token-weighted mean cross-entropy over `examples`, dropout off.
pub fn evaluate_lm(model: &Model, examples: &[LmExample], batch_size: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let _g = no_grad();
    let refs: Vec<&LmExample> = examples.iter().collect();
    let (mut total, mut count) = (0.0f64, 0usize);
    for chunk in refs.chunks(batch_size.max(1)) {
        let (loss, n) = lm_batch_loss(model, chunk, None)?;
        total += loss.item() as f64 * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

fn check_split(train: &[impl Sized], val: &[impl Sized]) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation sets must both be non-empty".into()));
    }
    Ok(())
}

fn split<T: Clone>(items: &[T], cfg: &TrainConfig) -> Result<(Vec<T>, Vec<T>)> {
    let (tr, va) = split_indices(items.len(), cfg.split_ratio, cfg.seed)?;
    Ok((
        tr.iter().map(|&i| items[i].clone()).collect(),
        va.iter().map(|&i| items[i].clone()).collect(),
    ))
}

/// Epoch-level bookkeeping shared by both loops.
struct Tracker {
    patience: Option<usize>,
    rises: usize,
    last_val_loss: Option<f64>,
    best: Option<(usize, f64, Vec<Vec<Float>>)>,
}

impl Tracker {
    fn new(patience: Option<usize>) -> Self {
        Tracker {
            patience,
            rises: 0,
            last_val_loss: None,
            best: None,
        }
    }

    /// Records an epoch; `score` is higher-is-better. Returns true to stop.
    fn epoch(&mut self, model: &Model, epoch: usize, val_loss: f64, score: f64) -> bool {
        if self.best.as_ref().is_none_or(|(_, s, _)| score > *s) {
            self.best = Some((epoch, score, model.snapshot()));
        }
        match self.last_val_loss {
            Some(prev) if val_loss > prev => self.rises += 1,
            _ => self.rises = 0,
        }
        self.last_val_loss = Some(val_loss);
        self.patience.is_some_and(|k| self.rises >= k)
    }
}

fn trainable(model: &Model, cfg: &TrainConfig) -> Vec<Tensor> {
    if cfg.freeze_backbone {
        model.head_parameters()
    } else {
        model.parameters()
    }
}

fn apply_step(
    model: &Model,
    params: &[Tensor],
    opt: &mut Optimizer,
    cfg: &TrainConfig,
    loss: &Tensor,
) -> Result<()> {
    model.parameters().iter().for_each(Tensor::zero_grad);
    loss.backward()?;
    if let Some(c) = cfg.grad_clip_norm {
        clip_grad_norm(params, c);
    }
    opt.step(params)?;
    model.parameters().iter().for_each(Tensor::zero_grad);
    Ok(())
}

/// Splits `lines` with the configured ratio and seed, then trains.
pub fn train_lm(lines: &[LmExample], model: &mut Model, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if lines.is_empty() {
        return Err(Error::Data("generator corpus is empty".into()));
    }
    cfg.validate()?;
    let (train, val) = split(lines, cfg)?;
    train_lm_on(model, &train, &val, cfg)
}

/// Teacher-forced next-character training. The model ends holding the
/// weights of the epoch with the lowest validation loss.
pub fn train_lm_on(
    model: &mut Model,
    train: &[LmExample],
    val: &[LmExample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_split(train, val)?;
    if model.config.head_type != HeadType::Lm {
        return Err(Error::HeadType {
            expected: "lm",
            found: model.config.head_type.name(),
        });
    }
    let params = model.parameters();
    let mut opt = Optimizer::new(cfg, &params);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut tracker = Tracker::new(cfg.patience);
    let mut log = MetricsLog::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut steps = 0;
    let mut epochs_run = 0;
    let start = Instant::now();

    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut sum, mut count) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let batch: Vec<&LmExample> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, n) = lm_batch_loss(model, &batch, Some(&mut drop_rng))?;
            sum += loss.item() as f64 * n as f64;
            count += n;
            apply_step(model, &params, &mut opt, cfg, &loss)?;
            steps += 1;
        }
        if count == 0 {
            break;
        }
        epochs_run = epoch;
        let val_loss = evaluate_lm(model, val, cfg.batch_size)?;
        log.push(epoch, "train", "loss", sum / count as f64);
        log.push(epoch, "val", "loss", val_loss);
        log.push(epoch, "val", "perplexity", perplexity(val_loss));
        log.push(epoch, "train", WALL_TIME, start.elapsed().as_secs_f64());
        log::info!("epoch {epoch}: train loss {:.4}, val loss {val_loss:.4}", sum / count as f64);
        if tracker.epoch(model, epoch, val_loss, -val_loss) {
            log::info!("validation loss rose {} epochs in a row, stopping", tracker.rises);
            break 'epochs;
        }
    }
    finish(model, tracker, log, steps, epochs_run, |s| -s)
}

fn finish(
    model: &Model,
    tracker: Tracker,
    log: MetricsLog,
    steps: usize,
    epochs_run: usize,
    unscore: impl Fn(f64) -> f64,
) -> Result<TrainOutcome> {
    let (best_epoch, best_score, snap) = tracker
        .best
        .ok_or_else(|| Error::Data("no epoch completed".into()))?;
    model.restore(&snap)?;
    Ok(TrainOutcome {
        log,
        steps,
        epochs_run,
        best_epoch,
        best_value: unscore(best_score),
    })
}

fn clf_loss(
    model: &Model,
    batch: &[&ClfExample],
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Tensor> {
    let refs: Vec<&[TokenId]> = batch.iter().map(|e| e.ids.as_slice()).collect();
    let targets: Vec<usize> = batch.iter().map(|e| e.label).collect();
    let logits = model.clf_logits(&refs, rng.map(|r| r as &mut dyn rand::RngCore))?;
    logits.cross_entropy_mean(&targets, None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Accuracy {
    pub accuracy: f64,
    pub mean_loss: f64,
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[Float]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, Float::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}

pub fn evaluate_accuracy(
    model: &Model,
    examples: &[ClfExample],
    batch_size: usize,
) -> Result<Accuracy> {
    if examples.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let s = model.config.n_sections;
    let _g = no_grad();
    let mut confusion = vec![vec![0usize; s]; s];
    let mut loss_sum = 0.0f64;
    let refs: Vec<&ClfExample> = examples.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let ids: Vec<&[TokenId]> = chunk.iter().map(|e| e.ids.as_slice()).collect();
        let logits = model.clf_logits(&ids, None)?;
        let targets: Vec<usize> = chunk.iter().map(|e| e.label).collect();
        loss_sum += logits.cross_entropy_mean(&targets, None)?.item() as f64 * chunk.len() as f64;
        for (row, e) in logits.to_vec().chunks(s).zip(chunk) {
            confusion[e.label][argmax(row)] += 1;
        }
    }
    let correct: usize = (0..s).map(|i| confusion[i][i]).sum();
    Ok(Accuracy {
        accuracy: correct as f64 / examples.len() as f64,
        mean_loss: loss_sum / examples.len() as f64,
        confusion,
    })
}

/// Splits titles with the configured ratio and seed, then fine-tunes.
pub fn fine_tune_classifier(
    titles: &[ClfExample],
    model: &mut Model,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut labels: Vec<usize> = titles.iter().map(|e| e.label).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() < 2 {
        return Err(Error::Data(format!(
            "classifier needs at least two classes, found {}",
            labels.len()
        )));
    }
    let (train, val) = split(titles, cfg)?;
    fine_tune_classifier_on(model, &train, &val, cfg)
}

/// Cross-entropy training of the section head. The model ends holding the
/// weights of the epoch with the best validation accuracy.
pub fn fine_tune_classifier_on(
    model: &mut Model,
    train: &[ClfExample],
    val: &[ClfExample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_split(train, val)?;
    let s = model.config.n_sections;
    if let Some(e) = train.iter().chain(val).find(|e| e.label >= s) {
        return Err(Error::Index {
            what: "section label",
            index: e.label,
            limit: s,
        });
    }
    for e in train.iter().chain(val) {
        loaded_position(&e.ids)?;
    }
    let params = trainable(model, cfg);
    let mut opt = Optimizer::new(cfg, &params);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut tracker = Tracker::new(cfg.patience);
    let mut log = MetricsLog::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut steps = 0;
    let mut epochs_run = 0;
    let start = Instant::now();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut sum, mut count) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let batch: Vec<&ClfExample> = chunk.iter().map(|&i| &train[i]).collect();
            let loss = clf_loss(model, &batch, Some(&mut drop_rng))?;
            sum += loss.item() as f64 * batch.len() as f64;
            count += batch.len();
            apply_step(model, &params, &mut opt, cfg, &loss)?;
            steps += 1;
        }
        if count == 0 {
            break;
        }
        epochs_run = epoch;
        let acc = evaluate_accuracy(model, val, cfg.batch_size)?;
        log.push(epoch, "train", "loss", sum / count as f64);
        log.push(epoch, "val", "loss", acc.mean_loss);
        log.push(epoch, "val", "accuracy", acc.accuracy);
        log.push(epoch, "train", WALL_TIME, start.elapsed().as_secs_f64());
        log::info!("epoch {epoch}: train loss {:.4}, val accuracy {:.4}", sum / count as f64, acc.accuracy);
        if tracker.epoch(model, epoch, acc.mean_loss, acc.accuracy) {
            break;
        }
    }
    finish(model, tracker, log, steps, epochs_run, |s| s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::text::{EOS, SOS};

    fn scalar_param(v: Float) -> Tensor {
        Tensor::param(vec![v], &[1]).unwrap()
    }

    fn set_grad(p: &Tensor, g: Float) {
        p.zero_grad();
        p.mul(&Tensor::scalar(g)).unwrap().sum().backward().unwrap();
    }

    #[test]
    fn sgd_examples() {
        let p = scalar_param(1.0);
        set_grad(&p, 0.5);
        sgd_step(std::slice::from_ref(&p), 0.1).unwrap();
        assert!((p.item() - 0.95).abs() < 1e-7);
        set_grad(&p, 0.0);
        sgd_step(std::slice::from_ref(&p), 0.1).unwrap();
        assert!((p.item() - 0.95).abs() < 1e-7);
        set_grad(&p, 3.0);
        sgd_step(std::slice::from_ref(&p), 0.0).unwrap();
        assert!((p.item() - 0.95).abs() < 1e-7);
        p.zero_grad();
        assert!(matches!(sgd_step(&[p], 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn adamw_first_step_is_signed_lr() {
        for g in [0.5 as Float, -2.0, 1e-3] {
            let p = scalar_param(1.0);
            set_grad(&p, g);
            let mut st = AdamState::new(std::slice::from_ref(&p));
            adamw_step(std::slice::from_ref(&p), &mut st, &AdamWHyper::new(0.01, 0.0)).unwrap();
            // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps).
            let expect = 1.0 - 0.01 * g as f64 / (g.abs() as f64 + 1e-8);
            assert!((p.item() as f64 - expect).abs() < 1e-6, "{g}");
        }
    }

    #[test]
    fn adamw_zero_grad_and_decay() {
        let p = scalar_param(2.0);
        set_grad(&p, 0.0);
        let mut st = AdamState::new(std::slice::from_ref(&p));
        adamw_step(std::slice::from_ref(&p), &mut st, &AdamWHyper::new(0.1, 0.0)).unwrap();
        assert_eq!(p.item(), 2.0);
        let mut st = AdamState::new(std::slice::from_ref(&p));
        adamw_step(std::slice::from_ref(&p), &mut st, &AdamWHyper::new(0.1, 0.5)).unwrap();
        assert!((p.item() - 2.0 * (1.0 - 0.05)).abs() < 1e-6);
    }

    #[test]
    fn adamw_state_must_match() {
        let p = scalar_param(1.0);
        set_grad(&p, 1.0);
        let mut st = AdamState::new(&[]);
        assert!(adamw_step(&[p], &mut st, &AdamWHyper::new(0.1, 0.0)).is_err());
    }

    #[test]
    fn decay_mask_skips_vectors() {
        let w = Tensor::param(vec![1.0; 4], &[2, 2]).unwrap();
        let b = Tensor::param(vec![1.0; 2], &[2]).unwrap();
        let st = AdamState::new(&[w.clone(), b.clone()]).decay_matrices_only(&[w, b]);
        assert_eq!(st.decay, vec![true, false]);
    }

    fn quadratic_converges(cfg: TrainConfig) -> Float {
        // f(x) = (x - 3)², minimum at 3.
        let x = scalar_param(-2.0);
        let mut opt = Optimizer::new(&cfg, &[x.clone()]);
        for _ in 0..1000 {
            x.zero_grad();
            let d = x.add(&Tensor::scalar(-3.0)).unwrap();
            d.mul(&d).unwrap().sum().backward().unwrap();
            opt.step(&[x.clone()]).unwrap();
        }
        x.item()
    }

    #[test]
    fn optimizers_minimize_quadratic() {
        let sgd = TrainConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        assert!((quadratic_converges(sgd) - 3.0).abs() < 1e-3);
        let adam = TrainConfig {
            learning_rate: 0.05,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        assert!((quadratic_converges(adam) - 3.0).abs() < 1e-3);
    }

    #[test]
    fn clipping_bounds_norm() {
        let a = Tensor::param(vec![3.0, 4.0], &[2]).unwrap();
        let b = Tensor::param(vec![12.0], &[1]).unwrap();
        a.mul(&a).unwrap().sum().scale(0.5).add(&b.mul(&b).unwrap().sum().scale(0.5)).unwrap().backward().unwrap();
        let before = clip_grad_norm(&[a.clone(), b.clone()], 1.0);
        assert!((before - 13.0).abs() < 1e-5);
        assert!(global_grad_norm(&[a.clone(), b.clone()]) <= 1.0 + 1e-6);
        let after = clip_grad_norm(&[a.clone(), b], 5.0);
        assert!(after <= 1.0 + 1e-6);
    }

    #[test]
    fn perplexity_examples() {
        assert_eq!(perplexity(0.0), 1.0);
        assert!((perplexity(10f64.ln()) - 10.0).abs() < 1e-12);
        assert!((perplexity(100f64.ln()) - 100.0).abs() < 1e-10);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            learning_rate: 0.0,
            split_ratio: 1.0,
            ..TrainConfig::default()
        };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(msg.contains("learning_rate") && msg.contains("split_ratio"));
    }

    #[test]
    fn csv_layout() {
        let mut log = MetricsLog {
            config_hash: Some("ff00".into()),
            ..MetricsLog::default()
        };
        log.push(1, "val", "loss", 0.5);
        log.push(1, "train", WALL_TIME, 3.25);
        assert_eq!(
            log.to_csv(),
            "# config_hash: ff00\nepoch,split,metric,value\n1,val,loss,0.5\n1,train,wall_time_s,3.25\n"
        );
        assert_eq!(log.without_timing().records.len(), 1);
    }

    fn tiny_lm() -> Model {
        let mut cfg = ModelConfig::desk(12, 2, HeadType::Lm).with_time_range(0, 10);
        cfg.d_model = 32;
        cfg.d_ff = 64;
        cfg.max_seq = 16;
        Model::new(cfg, 4).unwrap()
    }

    fn lm_line(body: &[TokenId], section: usize, len: usize) -> LmExample {
        let mut ids = vec![SOS];
        ids.extend_from_slice(body);
        ids.push(EOS);
        ids.resize(len, PAD);
        LmExample {
            ids,
            style: StyleSpec::new(section, section as i64 * 10),
        }
    }

    #[test]
    fn lm_loss_ignores_trailing_pads() {
        let m = tiny_lm();
        let short: Vec<LmExample> = (0..4)
            .map(|i| lm_line(&[6 + i, 7, 8, 9 - i % 2], (i % 2) as usize, 10))
            .collect();
        let long: Vec<LmExample> = short
            .iter()
            .map(|e| {
                let mut e = e.clone();
                let pads = e.ids.iter().filter(|&&t| t == PAD).count();
                e.ids.extend(std::iter::repeat_n(PAD, pads));
                e
            })
            .collect();
        let a = evaluate_lm(&m, &short, 4).unwrap();
        let b = evaluate_lm(&m, &long, 4).unwrap();
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn zero_head_lm_has_vocab_perplexity() {
        let m = tiny_lm();
        let lines: Vec<LmExample> = (0..5).map(|i| lm_line(&[6 + i, 7], 0, 8)).collect();
        let ppl = perplexity(evaluate_lm(&m, &lines, 2).unwrap());
        assert!((ppl - 12.0).abs() / 12.0 < 1e-4, "{ppl}");
    }

    fn learnable_lines() -> Vec<LmExample> {
        (0..24)
            .map(|i| {
                let s = i % 2;
                let body: Vec<TokenId> = (0..8).map(|j| 6 + (s * 3 + j % 3) as TokenId).collect();
                lm_line(&body, s, 12)
            })
            .collect()
    }

    #[test]
    fn lm_loss_decreases_and_log_is_consistent() {
        let mut m = tiny_lm();
        let cfg = TrainConfig {
            learning_rate: 3e-3,
            batch_size: 4,
            epochs: 3,
            patience: None,
            ..TrainConfig::default()
        };
        let lines = learnable_lines();
        let out = train_lm_on(&mut m, &lines, &lines[..8], &cfg).unwrap();
        let losses = out.log.series("train", "loss");
        assert_eq!(losses.len(), 3);
        assert!(losses[2] < losses[0] && losses[1] <= losses[0] + 1e-3, "{losses:?}");
        for e in 1..=3 {
            let l = out.log.get(e, "val", "loss").unwrap();
            assert_eq!(out.log.get(e, "val", "perplexity").unwrap(), l.exp());
        }
        assert_eq!(out.steps, 18);
    }

    #[test]
    fn lm_training_is_reproducible() {
        let cfg = TrainConfig {
            batch_size: 8,
            epochs: 2,
            ..TrainConfig::default()
        };
        let lines = learnable_lines();
        let run = || {
            let mut m = tiny_lm();
            let out = train_lm(&lines, &mut m, &cfg).unwrap();
            (out.log.without_timing(), m.snapshot())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn best_epoch_weights_are_kept() {
        let mut m = tiny_lm();
        let cfg = TrainConfig {
            learning_rate: 3e-3,
            batch_size: 4,
            epochs: 4,
            patience: None,
            ..TrainConfig::default()
        };
        let lines = learnable_lines();
        let out = train_lm_on(&mut m, &lines, &lines[..6], &cfg).unwrap();
        let vals = out.log.series("val", "loss");
        let best = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_value, best);
        let now = evaluate_lm(&m, &lines[..6], 4).unwrap();
        assert!((now - best).abs() < 1e-9);
    }

    #[test]
    fn early_stop_after_consecutive_rises() {
        let mut t = Tracker::new(Some(2));
        let m = tiny_lm();
        assert!(!t.epoch(&m, 1, 1.0, -1.0));
        assert!(!t.epoch(&m, 2, 1.1, -1.1));
        assert!(!t.epoch(&m, 3, 0.9, -0.9));
        assert!(!t.epoch(&m, 4, 1.0, -1.0));
        assert!(t.epoch(&m, 5, 1.2, -1.2));
        assert_eq!(t.best.as_ref().unwrap().0, 3);
    }

    #[test]
    fn empty_inputs_are_errors() {
        let mut m = tiny_lm();
        assert!(train_lm(&[], &mut m, &TrainConfig::default()).is_err());
        assert!(evaluate_lm(&m, &[], 4).is_err());
    }

    fn tiny_clf(n_sections: usize) -> Model {
        let mut cfg = ModelConfig::desk(14, n_sections, HeadType::Classifier);
        cfg.d_model = 32;
        cfg.d_ff = 64;
        cfg.max_seq = 12;
        Model::new(cfg, 7).unwrap()
    }

    fn titles() -> Vec<ClfExample> {
        (0..60)
            .map(|i| {
                let label = i % 3;
                let mut ids = vec![SOS];
                ids.extend((0..(3 + i % 4)).map(|j| (6 + label * 2 + j % 2) as TokenId));
                ids.push(EOS);
                ids.resize(12, PAD);
                ClfExample { ids, label }
            })
            .collect()
    }

    #[test]
    fn classifier_learns_separable_titles() {
        let mut m = tiny_clf(3);
        let cfg = TrainConfig {
            learning_rate: 3e-3,
            batch_size: 8,
            epochs: 4,
            ..TrainConfig::default()
        };
        let out = fine_tune_classifier(&titles(), &mut m, &cfg).unwrap();
        assert!(out.best_value >= 0.95, "{:?}", out.log);
        let acc = evaluate_accuracy(&m, &titles(), 16).unwrap();
        assert!(acc.accuracy >= 0.95);
    }

    #[test]
    fn single_class_corpus_is_rejected() {
        let mut m = tiny_clf(3);
        let one: Vec<ClfExample> = titles().into_iter().filter(|e| e.label == 0).collect();
        assert!(matches!(
            fine_tune_classifier(&one, &mut m, &TrainConfig::default()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn confusion_rows_sum_to_class_counts() {
        let m = tiny_clf(3);
        m.params.head_b.set_data(vec![0.0, 1.0, 0.0]).unwrap();
        let t = titles();
        let acc = evaluate_accuracy(&m, &t, 7).unwrap();
        for c in 0..3 {
            let n = t.iter().filter(|e| e.label == c).count();
            assert_eq!(acc.confusion[c].iter().sum::<usize>(), n);
            assert_eq!(acc.confusion[c][1], n);
        }
        assert!((acc.accuracy - 1.0 / 3.0).abs() < 1e-12);
        assert!(evaluate_accuracy(&m, &[], 4).is_err());
    }

    #[test]
    fn perfect_predictions_are_diagonal() {
        let m = tiny_clf(2);
        // A head that reads the label straight off a bias is impossible, so
        // use one title per class and a head fit by hand on their latents.
        let a = ClfExample { ids: vec![SOS, 6, 6, EOS], label: 0 };
        let b = ClfExample { ids: vec![SOS, 9, 9, 9, EOS], label: 1 };
        let la = m.extract_latent(&a.ids).unwrap();
        let lb = m.extract_latent(&b.ids).unwrap();
        let d = la.len();
        let mut w = vec![0.0; d * 2];
        for i in 0..d {
            let diff = la[i] - lb[i];
            w[i * 2] = diff;
            w[i * 2 + 1] = -diff;
        }
        m.params.head_w.set_data(w).unwrap();
        let acc = evaluate_accuracy(&m, &[a, b], 2).unwrap();
        assert_eq!(acc.accuracy, 1.0);
        assert_eq!(acc.confusion, vec![vec![1, 0], vec![0, 1]]);
    }

    #[test]
    fn frozen_backbone_moves_only_head() {
        let mut m = tiny_clf(3);
        let before = m.snapshot();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            batch_size: 8,
            epochs: 1,
            freeze_backbone: true,
            ..TrainConfig::default()
        };
        fine_tune_classifier(&titles(), &mut m, &cfg).unwrap();
        let after = m.snapshot();
        let n = after.len();
        assert_eq!(&after[..n - 2], &before[..n - 2]);
        assert_ne!(&after[n - 2..], &before[n - 2..]);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
