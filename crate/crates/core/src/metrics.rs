//! Boundary latency against gold alignments and token error rate.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Sample;
use crate::decode::teacher_forced;
use crate::model::{Model, EOS};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty evaluation set")]
    Empty,
    #[error("utterance {index}: {pred} predicted boundaries for {gold} gold")]
    LengthMismatch { index: usize, pred: usize, gold: usize },
}

/// Signed `predicted - gold` per token, grouped by utterance.
pub fn deltas(pred: &[Vec<usize>], gold: &[Vec<usize>]) -> Result<Vec<Vec<i64>>, MetricsError> {
    if pred.len() != gold.len() {
        return Err(MetricsError::LengthMismatch { index: pred.len().min(gold.len()), pred: pred.len(), gold: gold.len() });
    }
    pred.iter()
        .zip(gold)
        .enumerate()
        .map(|(k, (p, g))| {
            if p.len() != g.len() {
                return Err(MetricsError::LengthMismatch { index: k, pred: p.len(), gold: g.len() });
            }
            Ok(p.iter().zip(g).map(|(&a, &b)| a as i64 - b as i64).collect())
        })
        .collect()
}

/// Mean delta over all tokens.
pub fn corpus_latency(deltas: &[Vec<i64>]) -> Result<f64, MetricsError> {
    let n: usize = deltas.iter().map(Vec::len).sum();
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(deltas.iter().flatten().map(|&d| d as f64).sum::<f64>() / n as f64)
}

/// Mean of per-utterance mean deltas; utterances without tokens are skipped.
pub fn utterance_latency(deltas: &[Vec<i64>]) -> Result<f64, MetricsError> {
    let means: Vec<f64> = deltas
        .iter()
        .filter(|d| !d.is_empty())
        .map(|d| d.iter().map(|&x| x as f64).sum::<f64>() / d.len() as f64)
        .collect();
    if means.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(means.iter().sum::<f64>() / means.len() as f64)
}

/// Nearest-rank percentile of sorted values, `q` in (0, 100].
pub fn nearest_rank(sorted: &[i64], q: f64) -> i64 {
    assert!(!sorted.is_empty(), "percentile of empty sample");
    let rank = ((q / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub avg: f64,
    pub median: i64,
    pub p90: i64,
    pub p99: i64,
}

pub fn latency_percentiles(pooled: &[i64]) -> Result<Percentiles, MetricsError> {
    if pooled.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut s = pooled.to_vec();
    s.sort_unstable();
    Ok(Percentiles {
        avg: s.iter().map(|&x| x as f64).sum::<f64>() / s.len() as f64,
        median: nearest_rank(&s, 50.0),
        p90: nearest_rank(&s, 90.0),
        p99: nearest_rank(&s, 99.0),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub deltas: Vec<Vec<i64>>,
    pub avg: f64,
    pub utterance_avg: f64,
    pub median: i64,
    pub p90: i64,
    pub p99: i64,
    pub n_tokens: usize,
    pub n_utterances: usize,
    pub frame_ms: f64,
}

impl LatencyReport {
    pub fn from_deltas(deltas: Vec<Vec<i64>>, frame_ms: f64) -> Result<Self, MetricsError> {
        let pooled: Vec<i64> = deltas.iter().flatten().copied().collect();
        let pct = latency_percentiles(&pooled)?;
        Ok(LatencyReport {
            avg: corpus_latency(&deltas)?,
            utterance_avg: utterance_latency(&deltas)?,
            median: pct.median,
            p90: pct.p90,
            p99: pct.p99,
            n_tokens: pooled.len(),
            n_utterances: deltas.len(),
            frame_ms,
            deltas,
        })
    }

    pub fn pooled(&self) -> Vec<i64> {
        self.deltas.iter().flatten().copied().collect()
    }
}

impl fmt::Display for LatencyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "avg = {:.4}", self.avg)?;
        writeln!(f, "utterance_avg = {:.4}", self.utterance_avg)?;
        writeln!(f, "median = {}", self.median)?;
        writeln!(f, "p90 = {}", self.p90)?;
        writeln!(f, "p99 = {}", self.p99)?;
        writeln!(f, "n_tokens = {}", self.n_tokens)?;
        writeln!(f, "n_utterances = {}", self.n_utterances)?;
        write!(f, "frame_ms = {}", self.frame_ms)
    }
}

/// Teacher-forced predicted boundaries for one sample.
pub fn extract_boundaries_teacher_forced(model: &Model, sample: &Sample) -> Vec<usize> {
    teacher_forced(model, &sample.frames, &sample.tokens).boundaries
}

/// Teacher-forced latency and token accuracy over a set of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: LatencyReport,
    pub token_acc: f64,
    /// Boundaries for every token, EOS included.
    pub predicted: Vec<Vec<usize>>,
}

pub fn evaluate(model: &Model, samples: &[Sample], include_eos: bool, frame_ms: f64) -> Result<Evaluation, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut all_deltas = Vec::with_capacity(samples.len());
    let mut predicted = Vec::with_capacity(samples.len());
    let (mut correct, mut total) = (0usize, 0usize);
    for s in samples {
        let tf = teacher_forced(model, &s.frames, &s.tokens);
        correct += tf.predictions.iter().zip(&s.tokens).filter(|(a, b)| a == b).count();
        total += s.tokens.len();
        let d: Vec<i64> = tf
            .boundaries
            .iter()
            .zip(&s.boundaries)
            .zip(&s.tokens)
            .filter(|(_, &y)| include_eos || y != EOS)
            .map(|((&p, &g), _)| p as i64 - g as i64)
            .collect();
        all_deltas.push(d);
        predicted.push(tf.boundaries);
    }
    let report = LatencyReport::from_deltas(all_deltas, frame_ms)?;
    Ok(Evaluation { report, token_acc: correct as f64 / total.max(1) as f64, predicted })
}

pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance over `|ref|`; an empty reference gives `|hyp|`.
pub fn token_error_rate<T: PartialEq>(hyp: &[T], reference: &[T]) -> f64 {
    let d = edit_distance(hyp, reference) as f64;
    if reference.is_empty() {
        d
    } else {
        d / reference.len() as f64
    }
}
