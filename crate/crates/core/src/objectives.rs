//! Latency-reduction training objectives and their composition.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Batch, Sample};
use crate::model::{framewise_ce, label_smoothed_ce, Model, ModelVars, SoftForward, SoftOptions};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveMode {
    Baseline,
    MtlCe,
    PtCeStage1,
    PtCeStage2,
    Decot,
    Minlt,
    DecotMinlt,
}

impl ObjectiveMode {
    pub fn uses_decot(self) -> bool {
        matches!(self, ObjectiveMode::Decot | ObjectiveMode::DecotMinlt)
    }

    pub fn uses_minlt(self) -> bool {
        matches!(self, ObjectiveMode::Minlt | ObjectiveMode::DecotMinlt)
    }

    /// Modes that need the framewise CE branch.
    pub fn uses_ce(self) -> bool {
        matches!(self, ObjectiveMode::MtlCe | ObjectiveMode::PtCeStage1)
    }

    pub fn needs_boundaries(self) -> bool {
        self.uses_decot() || self.uses_minlt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub mode: ObjectiveMode,
    pub lambda_ce: f64,
    pub lambda_qua: f64,
    pub lambda_minlt: f64,
    /// Acceptable latency in encoder frames.
    pub delta: usize,
    pub quantity_loss: bool,
    /// Replace every gold boundary by 0 in the MinLT target.
    #[serde(default)]
    pub minlt_zero_boundaries: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            mode: ObjectiveMode::Baseline,
            lambda_ce: 0.5,
            lambda_qua: 1.0,
            lambda_minlt: 1.0,
            delta: 16,
            quantity_loss: true,
            minlt_zero_boundaries: false,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("mode {0:?} needs the framewise CE branch")]
    MissingCeBranch(ObjectiveMode),
    #[error("mode {0:?} needs gold boundaries")]
    MissingBoundaries(ObjectiveMode),
    #[error("lambda_ce must be in [0, 1], got {0}")]
    LambdaCe(f64),
    #[error("{0} must be >= 0")]
    NegativeWeight(&'static str),
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(0.0..=1.0).contains(&self.lambda_ce) {
            return Err(ObjectiveError::LambdaCe(self.lambda_ce));
        }
        if !(self.lambda_qua >= 0.0) {
            return Err(ObjectiveError::NegativeWeight("lambda_qua"));
        }
        if !(self.lambda_minlt >= 0.0) {
            return Err(ObjectiveError::NegativeWeight("lambda_minlt"));
        }
        Ok(())
    }
}

/// `(1 - lambda) * l_s2s + lambda * l_ce`.
pub fn mtl_loss(g: &mut Graph, l_s2s: Var, l_ce: Var, lambda_ce: f64) -> Var {
    assert!((0.0..=1.0).contains(&lambda_ce), "lambda_ce must be in [0, 1]");
    let a = g.scale(l_s2s, 1.0 - lambda_ce);
    let b = g.scale(l_ce, lambda_ce);
    g.add(a, b)
}

/// `|L - sum_i sum_j alpha_ij|`.
pub fn quantity_loss(g: &mut Graph, alpha: &[Var]) -> Var {
    let sums: Vec<Var> = alpha.iter().map(|&a| g.sum(a)).collect();
    let all = g.concat(&sums);
    let total = g.sum(all);
    let diff = g.affine(total, -1.0, alpha.len() as f64);
    g.abs(diff)
}

/// `(1/L) sum_i |sum_j j alpha_ij - b_i|` with 1-based frames.
pub fn minlt_loss(g: &mut Graph, alpha: &[Var], boundaries: &[usize]) -> Var {
    assert_eq!(alpha.len(), boundaries.len(), "one gold boundary per token");
    assert!(!alpha.is_empty(), "minlt_loss needs at least one token");
    let terms: Vec<Var> = alpha
        .iter()
        .zip(boundaries)
        .map(|(&a, &b)| {
            let t = g.value(a).len();
            let idx: Vec<f64> = (1..=t).map(|j| j as f64).collect();
            let weighted = g.mul_const(a, &idx);
            let expected = g.sum(weighted);
            let gap = g.affine(expected, 1.0, -(b as f64));
            g.abs(gap)
        })
        .collect();
    let all = g.concat(&terms);
    let s = g.sum(all);
    g.scale(s, 1.0 / alpha.len() as f64)
}

/// Scalar terms feeding [`total_loss`].
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub s2s: Option<Var>,
    pub ce: Option<Var>,
    pub quantity: Option<Var>,
    pub minlt: Option<Var>,
}

pub fn total_loss(g: &mut Graph, terms: &LossTerms, cfg: &ObjectiveConfig) -> Result<Var, ObjectiveError> {
    cfg.validate()?;
    let mode = cfg.mode;
    let s2s = || terms.s2s.expect("s2s loss term");
    let need = |v: Option<Var>, e: ObjectiveError| v.ok_or(e);
    match mode {
        ObjectiveMode::Baseline | ObjectiveMode::PtCeStage2 => Ok(s2s()),
        ObjectiveMode::PtCeStage1 => need(terms.ce, ObjectiveError::MissingCeBranch(mode)),
        ObjectiveMode::MtlCe => {
            let ce = need(terms.ce, ObjectiveError::MissingCeBranch(mode))?;
            Ok(mtl_loss(g, s2s(), ce, cfg.lambda_ce))
        }
        ObjectiveMode::Decot | ObjectiveMode::Minlt | ObjectiveMode::DecotMinlt => {
            let mut total = s2s();
            if mode.uses_decot() && cfg.quantity_loss {
                let q = need(terms.quantity, ObjectiveError::MissingBoundaries(mode))?;
                let w = g.scale(q, cfg.lambda_qua);
                total = g.add(total, w);
            }
            if mode.uses_minlt() {
                let m = need(terms.minlt, ObjectiveError::MissingBoundaries(mode))?;
                let w = g.scale(m, cfg.lambda_minlt);
                total = g.add(total, w);
            }
            Ok(total)
        }
    }
}

/// Values of one utterance's loss terms after the forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub s2s: f64,
    pub ce: Option<f64>,
    pub quantity: Option<f64>,
    pub minlt: Option<f64>,
    pub correct: usize,
    pub tokens: usize,
}

/// The graph for one utterance's training loss plus its diagnostics.
pub struct UtteranceLoss {
    pub loss: Var,
    pub report: LossReport,
    pub forward: Option<SoftForward>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = k;
        }
    }
    best
}

/// Builds the configured loss for `sample` inside `g`.
pub fn utterance_loss(
    g: &mut Graph,
    model: &Model,
    vars: &ModelVars,
    sample: &Sample,
    cfg: &ObjectiveConfig,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<UtteranceLoss, ObjectiveError> {
    cfg.validate()?;
    let mode = cfg.mode;
    if mode.uses_ce() && vars.ce_out.is_none() {
        return Err(ObjectiveError::MissingCeBranch(mode));
    }
    if mode.needs_boundaries() && sample.boundaries.len() != sample.tokens.len() {
        return Err(ObjectiveError::MissingBoundaries(mode));
    }
    let train = rng.is_some();
    if mode == ObjectiveMode::PtCeStage1 {
        let enc = model.encode(g, vars, &sample.frames, rng);
        let ce = framewise_ce(g, enc.ce_logits.expect("ce head"), &sample.align);
        let v = g.scalar(ce);
        let report = LossReport { total: v, ce: Some(v), ..LossReport::default() };
        return Ok(UtteranceLoss { loss: ce, report, forward: None });
    }
    let opts = SoftOptions {
        train,
        delay_constraint: mode.uses_decot().then(|| (sample.boundaries.clone(), cfg.delta)),
    };
    let fwd = model.forward_soft(g, vars, &sample.frames, &sample.tokens, &opts, rng);
    let s2s = label_smoothed_ce(g, fwd.logits, &sample.tokens, model.config.decoder.label_smoothing);
    let mut terms = LossTerms { s2s: Some(s2s), ..LossTerms::default() };
    if mode == ObjectiveMode::MtlCe {
        terms.ce = Some(framewise_ce(g, fwd.encoded.ce_logits.expect("ce head"), &sample.align));
    }
    if mode.uses_decot() && cfg.quantity_loss {
        terms.quantity = Some(quantity_loss(g, &fwd.alpha));
    }
    if mode.uses_minlt() {
        let target: Vec<usize> =
            if cfg.minlt_zero_boundaries { vec![0; sample.boundaries.len()] } else { sample.boundaries.clone() };
        terms.minlt = Some(minlt_loss(g, &fwd.alpha, &target));
    }
    let loss = total_loss(g, &terms, cfg)?;
    let k = g.value(fwd.logits).cols();
    let correct =
        g.data(fwd.logits).chunks(k).zip(&sample.tokens).filter(|(row, &t)| argmax(row) == t).count();
    let report = LossReport {
        total: g.scalar(loss),
        s2s: g.scalar(s2s),
        ce: terms.ce.map(|v| g.scalar(v)),
        quantity: terms.quantity.map(|v| g.scalar(v)),
        minlt: terms.minlt.map(|v| g.scalar(v)),
        correct,
        tokens: sample.tokens.len(),
    };
    Ok(UtteranceLoss { loss, report, forward: Some(fwd) })
}

/// Mean total loss of a batch, one graph per utterance (no gradients).
pub fn mean_loss(model: &Model, samples: &[Sample], cfg: &ObjectiveConfig) -> Result<f64, ObjectiveError> {
    let mut sum = 0.0;
    for s in samples {
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        sum += utterance_loss(&mut g, model, &vars, s, cfg, None)?.report.total;
    }
    Ok(sum / samples.len().max(1) as f64)
}

/// Mean total loss over the items of a padded batch; padding is stripped
/// per item so it contributes nothing.
pub fn batch_loss(model: &Model, batch: &Batch, cfg: &ObjectiveConfig) -> Result<f64, ObjectiveError> {
    let items: Vec<Sample> = (0..batch.len()).map(|b| batch.item(b)).collect();
    mean_loss(model, &items, cfg)
}

/// Alignment matrix rows as plain vectors.
pub fn alignment_rows(g: &Graph, rows: &[Var]) -> Vec<Vec<f64>> {
    rows.iter().map(|&v| g.data(v).to_vec()).collect()
}

pub fn constant_rows(g: &mut Graph, rows: &[Vec<f64>]) -> Vec<Var> {
    rows.iter().map(|r| g.constant(Tensor::vector(r.clone()))).collect()
}
