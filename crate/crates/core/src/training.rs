//! Optimization loop: Adam with global-norm clipping, parameter freezing,
//! staged CE pre-training, warm starts and per-epoch evaluation.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Sample;
use crate::metrics::{evaluate, MetricsError};
use crate::model::{framewise_ce, Model, ParamStore};
use crate::objectives::{utterance_loss, ObjectiveConfig, ObjectiveError, ObjectiveMode};
use crate::tensor::Graph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub objective: ObjectiveConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub grad_clip: f64,
    pub seed: u64,
    #[serde(default)]
    pub warm_start: Option<String>,
    /// Parameter-name prefixes kept fixed in addition to the mode's own set.
    #[serde(default)]
    pub freeze: Vec<String>,
    #[serde(default = "default_stage1_max_epochs")]
    pub stage1_max_epochs: usize,
    /// Relative held-out CE improvement below which a stage-1 epoch counts as
    /// stalled.
    #[serde(default = "default_stage1_tolerance")]
    pub stage1_tolerance: f64,
    #[serde(default = "default_stage1_patience")]
    pub stage1_patience: usize,
    #[serde(default = "default_true")]
    pub include_eos: bool,
    #[serde(default = "default_frame_ms")]
    pub frame_ms: f64,
}

fn default_stage1_max_epochs() -> usize {
    20
}
fn default_stage1_tolerance() -> f64 {
    1e-3
}
fn default_stage1_patience() -> usize {
    3
}
fn default_true() -> bool {
    true
}
fn default_frame_ms() -> f64 {
    30.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: ObjectiveConfig::default(),
            learning_rate: 1.3e-4,
            batch_size: 8,
            epochs: 10,
            grad_clip: 5.0,
            seed: 0,
            warm_start: None,
            freeze: Vec::new(),
            stage1_max_epochs: default_stage1_max_epochs(),
            stage1_tolerance: default_stage1_tolerance(),
            stage1_patience: default_stage1_patience(),
            include_eos: true,
            frame_ms: default_frame_ms(),
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
}

impl TrainConfig {
    pub fn validate(&self, model: &Model) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be > 0");
        }
        self.objective.validate()?;
        let mode = self.objective.mode;
        if mode.uses_ce() && !model.config.encoder.ce_head {
            return Err(ObjectiveError::MissingCeBranch(mode).into());
        }
        Ok(())
    }
}

/// Parameters a mode never updates.
pub fn mode_frozen(mode: ObjectiveMode, name: &str) -> bool {
    let ce_branch = name.starts_with("enc.proj_ce.") || name.starts_with("ce.");
    match mode {
        ObjectiveMode::PtCeStage1 => !(name.starts_with("enc.") && !name.starts_with("enc.proj_s2s.") || ce_branch),
        ObjectiveMode::PtCeStage2 => ce_branch,
        _ => false,
    }
}

pub fn is_frozen(cfg: &TrainConfig, name: &str) -> bool {
    mode_frozen(cfg.objective.mode, name) || cfg.freeze.iter().any(|p| name.starts_with(p.as_str()))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: BTreeMap::new() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient entry was non-finite; nothing changed.
    Skipped,
}

/// Bias-corrected Adam on every parameter with a gradient in `grads`.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    lr: f64,
) -> StepOutcome {
    if grads.values().flatten().any(|g| !g.is_finite()) {
        return StepOutcome::Skipped;
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, g) in grads {
        let Some(p) = params.get_mut(name) else { continue };
        let mom = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| Moments { m: vec![0.0; g.len()], v: vec![0.0; g.len()] });
        for (k, (x, &gk)) in p.data_mut().iter_mut().zip(g).enumerate() {
            mom.m[k] = b1 * mom.m[k] + (1.0 - b1) * gk;
            mom.v[k] = b2 * mom.v[k] + (1.0 - b2) * gk * gk;
            let mh = mom.m[k] / c1;
            let vh = mom.v[k] / c2;
            *x -= lr * mh / (vh.sqrt() + eps);
        }
    }
    StepOutcome::Applied
}

pub fn global_norm(grads: &BTreeMap<String, Vec<f64>>) -> f64 {
    grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub token_acc: f64,
    pub latency_avg: f64,
    pub latency_median: i64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub latency_p99: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub stage: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dev_ce: Option<f64>,
    #[serde(default)]
    pub skipped_steps: usize,
}

/// Mean framewise CE of the CE branch over `samples`.
pub fn heldout_ce(model: &Model, samples: &[Sample]) -> Option<f64> {
    if !model.config.encoder.ce_head || samples.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for s in samples {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let enc = model.encode(&mut g, &vars, &s.frames, None);
        let ce = framewise_ce(&mut g, enc.ce_logits.expect("ce head"), &s.align);
        sum += g.scalar(ce);
    }
    Some(sum / samples.len() as f64)
}

/// Stateful trainer for one model.
pub struct Trainer {
    pub config: TrainConfig,
    pub adam: AdamState,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Trainer { config, adam: AdamState::default(), rng, epoch: 0 }
    }

    /// One pass over `train` in shuffled mini-batches.
    pub fn run_epoch(&mut self, model: &mut Model, train: &[Sample]) -> Result<(f64, usize), TrainError> {
        self.epoch += 1;
        let cfg = self.config.clone();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let frozen: BTreeSet<String> = model.params.names().filter(|n| is_frozen(&cfg, n)).cloned().collect();
        let (mut loss_sum, mut skipped) = (0.0, 0);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let mut g = Graph::new();
                let vars = model.bind_with(&mut g, |n| !frozen.contains(n));
                let out = utterance_loss(&mut g, model, &vars, &train[i], &cfg.objective, Some(&mut self.rng))?;
                let l = g.scalar(out.loss);
                if !l.is_finite() {
                    return Err(TrainError::NonFiniteLoss { epoch: self.epoch, batch: bi });
                }
                batch_loss += l;
                g.backward(out.loss).expect("scalar loss");
                for (name, grad) in vars.bound.grads(&g) {
                    if frozen.contains(&name) {
                        continue;
                    }
                    let dst = acc.entry(name).or_insert_with(|| vec![0.0; grad.len()]);
                    dst.iter_mut().zip(&grad).for_each(|(d, x)| *d += x);
                }
            }
            let n = chunk.len() as f64;
            acc.values_mut().flatten().for_each(|g| *g /= n);
            clip_global_norm(&mut acc, cfg.grad_clip);
            if adam_step(&mut model.params, &acc, &mut self.adam, cfg.learning_rate) == StepOutcome::Skipped {
                skipped += 1;
            }
            loss_sum += batch_loss;
        }
        Ok((loss_sum / train.len().max(1) as f64, skipped))
    }

    pub fn evaluate_epoch(&self, model: &Model, loss: f64, skipped: usize, dev: &[Sample]) -> Result<EpochLog, TrainError> {
        let stage = match self.config.objective.mode {
            ObjectiveMode::PtCeStage1 => Some("pt-ce-stage1".to_string()),
            ObjectiveMode::PtCeStage2 => Some("pt-ce-stage2".to_string()),
            _ => None,
        };
        let mut log = EpochLog {
            epoch: self.epoch,
            loss,
            token_acc: f64::NAN,
            latency_avg: f64::NAN,
            latency_median: 0,
            latency_p99: None,
            stage,
            dev_ce: heldout_ce(model, dev),
            skipped_steps: skipped,
        };
        if !dev.is_empty() {
            let ev = evaluate(model, dev, self.config.include_eos, self.config.frame_ms)?;
            log.token_acc = ev.token_acc;
            log.latency_avg = ev.report.avg;
            log.latency_median = ev.report.median;
            log.latency_p99 = Some(ev.report.p99);
        }
        Ok(log)
    }
}

/// Trains for `config.epochs` epochs, calling `on_epoch` after each.
pub fn train(
    model: &mut Model,
    config: &TrainConfig,
    train_set: &[Sample],
    dev: &[Sample],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Trainer, TrainError> {
    config.validate(model)?;
    let mut trainer = Trainer::new(config.clone());
    for _ in 0..config.epochs {
        let (loss, skipped) = trainer.run_epoch(model, train_set)?;
        let log = trainer.evaluate_epoch(model, loss, skipped, dev)?;
        on_epoch(&log);
    }
    Ok(trainer)
}

/// Stage 1 until held-out CE stalls (or the epoch cap), then stage 2 for
/// `config.epochs` epochs.
pub fn train_pt_ce(
    model: &mut Model,
    config: &TrainConfig,
    train_set: &[Sample],
    dev: &[Sample],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Trainer, TrainError> {
    let mut s1 = config.clone();
    s1.objective.mode = ObjectiveMode::PtCeStage1;
    s1.validate(model)?;
    let mut trainer = Trainer::new(s1.clone());
    let mut best = f64::INFINITY;
    let mut stalled = 0;
    for _ in 0..s1.stage1_max_epochs {
        let (loss, skipped) = trainer.run_epoch(model, train_set)?;
        let log = trainer.evaluate_epoch(model, loss, skipped, dev)?;
        on_epoch(&log);
        let ce = log.dev_ce.unwrap_or(loss);
        if best.is_finite() && (best - ce) / best < s1.stage1_tolerance {
            stalled += 1;
        } else {
            stalled = 0;
        }
        best = best.min(ce);
        if stalled >= s1.stage1_patience {
            break;
        }
    }
    let mut s2 = config.clone();
    s2.objective.mode = ObjectiveMode::PtCeStage2;
    s2.seed = config.seed.wrapping_add(1);
    let epoch = trainer.epoch;
    let mut trainer = Trainer::new(s2.clone());
    trainer.epoch = epoch;
    for _ in 0..s2.epochs {
        let (loss, skipped) = trainer.run_epoch(model, train_set)?;
        let log = trainer.evaluate_epoch(model, loss, skipped, dev)?;
        on_epoch(&log);
    }
    Ok(trainer)
}
