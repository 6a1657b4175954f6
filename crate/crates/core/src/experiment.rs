//! Desk-scale comparison runs: a baseline trained to a target accuracy, then
//! warm-started latency strategies evaluated on the same held-out set.

use serde::{Deserialize, Serialize};

use crate::config::{ModelSpec, RunConfig};
use crate::data::{gen_lookahead_task, prepare, Sample, TaskConfig};
use crate::metrics::{evaluate, Evaluation};
use crate::model::{Model, SoftOptions};
use crate::objectives::{ObjectiveConfig, ObjectiveMode};
use crate::tensor::Graph;
use crate::training::{EpochLog, TrainConfig, TrainError, Trainer};

/// The lookahead task and model used for the latency comparisons.
pub fn desk_config() -> RunConfig {
    RunConfig {
        task: TaskConfig {
            n: 2000,
            vocab: 16,
            min_duration: 4,
            max_duration: 8,
            min_tokens: 3,
            max_tokens: 6,
            noise_std: 0.1,
            lookshift: 1,
            stack: 1,
            seed: 1,
        },
        dev_size: 200,
        model: ModelSpec {
            encoder_layers: Some(1),
            encoder_hidden: Some(32),
            decoder_hidden: Some(32),
            embed_dim: Some(16),
            attn_dim: Some(16),
            dropout: Some(0.0),
            ..ModelSpec::default()
        },
        train: TrainConfig { learning_rate: 3e-3, batch_size: 16, epochs: 80, seed: 3, ..TrainConfig::default() },
        ..RunConfig::default()
    }
}

pub fn corpora(cfg: &RunConfig) -> (Vec<Sample>, Vec<Sample>) {
    let dev_task = TaskConfig { n: cfg.dev_size, seed: cfg.task.seed.wrapping_add(1_000_003), ..cfg.task.clone() };
    let train = prepare(&gen_lookahead_task(&cfg.task), cfg.task.stack).expect("generated corpus is valid");
    let dev = prepare(&gen_lookahead_task(&dev_task), cfg.task.stack).expect("generated corpus is valid");
    (train, dev)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub logs: Vec<EpochLog>,
    pub token_acc: f64,
    pub median: i64,
    pub p99: i64,
    pub avg: f64,
}

impl RunResult {
    fn new(logs: Vec<EpochLog>, ev: &Evaluation) -> Self {
        RunResult { logs, token_acc: ev.token_acc, median: ev.report.median, p99: ev.report.p99, avg: ev.report.avg }
    }
}

/// Trains until dev token accuracy reaches `target` and then `extra` more
/// epochs, or until `config.epochs` epochs have run.
pub fn train_to_accuracy(
    model: &mut Model,
    config: &TrainConfig,
    train: &[Sample],
    dev: &[Sample],
    target: f64,
    extra: usize,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<RunResult, TrainError> {
    config.validate(model)?;
    let mut trainer = Trainer::new(config.clone());
    let mut logs = Vec::new();
    let mut left: Option<usize> = None;
    for _ in 0..config.epochs {
        let (loss, skipped) = trainer.run_epoch(model, train)?;
        let log = trainer.evaluate_epoch(model, loss, skipped, dev)?;
        on_epoch(&log);
        let reached = log.token_acc >= target;
        logs.push(log);
        left = match left {
            None if reached => Some(extra),
            Some(n) => Some(n.saturating_sub(1)),
            l => l,
        };
        if left == Some(0) {
            break;
        }
    }
    let ev = evaluate(model, dev, config.include_eos, config.frame_ms)?;
    Ok(RunResult::new(logs, &ev))
}

/// Fine-tunes a copy of `base` with `objective` for `epochs` epochs.
pub fn warm_start(
    base: &Model,
    config: &TrainConfig,
    objective: ObjectiveConfig,
    epochs: usize,
    train: &[Sample],
    dev: &[Sample],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(Model, RunResult), TrainError> {
    let mut model = base.clone();
    let cfg = TrainConfig { objective, epochs, ..config.clone() };
    cfg.validate(&model)?;
    let mut trainer = Trainer::new(cfg.clone());
    let mut logs = Vec::new();
    for _ in 0..epochs {
        let (loss, skipped) = trainer.run_epoch(&mut model, train)?;
        let log = trainer.evaluate_epoch(&model, loss, skipped, dev)?;
        on_epoch(&log);
        logs.push(log);
    }
    let ev = evaluate(&model, dev, cfg.include_eos, cfg.frame_ms)?;
    Ok((model, RunResult::new(logs, &ev)))
}

pub fn objective(mode: ObjectiveMode) -> ObjectiveConfig {
    ObjectiveConfig { mode, ..ObjectiveConfig::default() }
}

/// Mean alignment row mass over the last quarter of each utterance's tokens
/// (at least one), with the delay mask applied when `delta` is given.
pub fn final_quarter_mass(model: &Model, samples: &[Sample], delta: Option<usize>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for s in samples {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let opts = SoftOptions { train: false, delay_constraint: delta.map(|d| (s.boundaries.clone(), d)) };
        let fwd = model.forward_soft(&mut g, &vars, &s.frames, &s.tokens, &opts, None);
        let l = fwd.alpha.len();
        let from = l - (l / 4).max(1);
        for &a in &fwd.alpha[from..] {
            sum += g.data(a).iter().sum::<f64>();
            n += 1;
        }
    }
    sum / n.max(1) as f64
}

/// Mean gold segment length in encoder frames.
pub fn mean_segment_length(samples: &[Sample]) -> f64 {
    let (mut sum, mut n) = (0usize, 0usize);
    for s in samples {
        let mut prev = 0;
        for &b in &s.boundaries[..s.boundaries.len() - 1] {
            sum += b - prev;
            prev = b;
            n += 1;
        }
    }
    sum as f64 / n.max(1) as f64
}
