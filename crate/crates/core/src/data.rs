//! Synthetic segmental corpora with gold alignments, JSONL storage, frame
//! stacking and batching.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EOS, PAD};
use crate::tensor::Tensor;

/// Offset of the first symbol token id (after PAD and EOS).
pub const FIRST_SYMBOL: usize = 2;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("utterance {id}: {msg}")]
    Invalid { id: String, msg: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Utterance {
    pub id: String,
    /// `T_raw x F`
    pub frames: Vec<Vec<f64>>,
    /// Framewise alignment labels, one per raw frame.
    pub align: Vec<usize>,
    /// EOS-terminated token ids.
    pub tokens: Vec<usize>,
    /// 1-based end frame of each token in encoder (post-stacking) frames.
    pub boundaries: Vec<usize>,
}

impl Utterance {
    pub fn raw_len(&self) -> usize {
        self.frames.len()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: String| Err(DataError::Invalid { id: self.id.clone(), msg });
        if self.frames.is_empty() {
            return bad("no frames".into());
        }
        let f = self.frames[0].len();
        if self.frames.iter().any(|r| r.len() != f) {
            return bad("ragged frames".into());
        }
        if self.align.len() != self.frames.len() {
            return bad(format!("{} alignment labels for {} frames", self.align.len(), self.frames.len()));
        }
        if self.tokens.len() != self.boundaries.len() {
            return bad(format!("{} tokens but {} boundaries", self.tokens.len(), self.boundaries.len()));
        }
        if self.tokens.last() != Some(&EOS) {
            return bad("tokens must end with EOS".into());
        }
        if self.tokens.iter().any(|&t| t == PAD) {
            return bad("PAD inside tokens".into());
        }
        if self.boundaries.iter().any(|&b| b < 1 || b > self.frames.len()) {
            return bad("boundary outside [1, T]".into());
        }
        if self.boundaries.windows(2).any(|w| w[1] < w[0]) {
            return bad("boundaries decrease".into());
        }
        Ok(())
    }

    /// Symbols of the maximal runs of `align`, in order.
    pub fn segment_symbols(&self) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for (j, &a) in self.align.iter().enumerate() {
            if j == 0 || self.align[j - 1] != a {
                out.push(a);
            }
        }
        out
    }
}

/// Parameters of the synthetic generators.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub n: usize,
    /// Segment alphabet size; token ids are `symbol + 2`.
    pub vocab: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub noise_std: f64,
    /// Token `i` depends on segments `i` and `i + lookshift`; 0 gives the
    /// plain segmental task.
    pub lookshift: usize,
    pub stack: usize,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            n: 200,
            vocab: 8,
            min_duration: 4,
            max_duration: 8,
            min_tokens: 3,
            max_tokens: 6,
            noise_std: 0.1,
            lookshift: 0,
            stack: 1,
            seed: 0,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.vocab < 2 {
            return Err("vocab must be >= 2".into());
        }
        if self.min_duration < 1 || self.max_duration < self.min_duration {
            return Err("durations must satisfy 1 <= min <= max".into());
        }
        if self.min_tokens < 1 || self.max_tokens < self.min_tokens {
            return Err("token counts must satisfy 1 <= min <= max".into());
        }
        if self.stack < 1 {
            return Err("stack must be >= 1".into());
        }
        if !(self.noise_std >= 0.0) {
            return Err("noise_std must be >= 0".into());
        }
        Ok(())
    }

    /// Output vocabulary size including PAD and EOS.
    pub fn output_vocab(&self) -> usize {
        self.vocab + FIRST_SYMBOL
    }
}

/// Token emitted for segment `i` of `symbols`.
pub fn lookahead_rule(symbols: &[usize], i: usize, lookshift: usize, vocab: usize) -> usize {
    if lookshift == 0 {
        symbols[i] + FIRST_SYMBOL
    } else {
        (symbols[i] + symbols[i + lookshift]) % vocab + FIRST_SYMBOL
    }
}

fn gen_utterance(cfg: &TaskConfig, index: usize) -> Utterance {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let normal = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("noise std");
    let n_tokens = rng.gen_range(cfg.min_tokens..=cfg.max_tokens);
    let n_segments = n_tokens + cfg.lookshift;
    let mut symbols = Vec::with_capacity(n_segments);
    for s in 0..n_segments {
        // Neighbouring segments differ so every segment is a maximal run.
        let sym = loop {
            let c = rng.gen_range(0..cfg.vocab);
            if s == 0 || symbols[s - 1] != c {
                break c;
            }
        };
        symbols.push(sym);
    }
    let mut frames = Vec::new();
    let mut align = Vec::new();
    let mut ends = Vec::with_capacity(n_segments);
    for &sym in &symbols {
        let dur = rng.gen_range(cfg.min_duration..=cfg.max_duration);
        for _ in 0..dur {
            let mut f = vec![0.0; cfg.vocab];
            f[sym] = 1.0;
            if cfg.noise_std > 0.0 {
                f.iter_mut().for_each(|x| *x += normal.sample(&mut rng));
            }
            frames.push(f);
            align.push(sym);
        }
        ends.push(frames.len());
    }
    let t_enc = stacked_len(frames.len(), cfg.stack);
    let mut tokens: Vec<usize> = (0..n_tokens).map(|i| lookahead_rule(&symbols, i, cfg.lookshift, cfg.vocab)).collect();
    let mut boundaries: Vec<usize> = ends[..n_tokens].iter().map(|&b| stack_boundary(b, cfg.stack)).collect();
    tokens.push(EOS);
    boundaries.push(t_enc);
    Utterance { id: format!("utt{index:06}"), frames, align, tokens, boundaries }
}

fn generate(cfg: &TaskConfig) -> Vec<Utterance> {
    cfg.validate().unwrap_or_else(|e| panic!("invalid task config: {e}"));
    (0..cfg.n).map(|i| gen_utterance(cfg, i)).collect()
}

/// Each token is its own segment's symbol.
pub fn gen_segmental_task(cfg: &TaskConfig) -> Vec<Utterance> {
    generate(&TaskConfig { lookshift: 0, ..cfg.clone() })
}

/// Each token combines its segment with the segment `lookshift` ahead, so it
/// cannot be predicted before that segment starts.
pub fn gen_lookahead_task(cfg: &TaskConfig) -> Vec<Utterance> {
    generate(cfg)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.display().to_string(), source }
}

pub fn write_jsonl(path: &Path, corpus: &[Utterance]) -> Result<(), DataError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for u in corpus {
        let line = serde_json::to_string(u).expect("utterance serializes");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Utterance>, DataError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let u: Utterance =
            serde_json::from_str(&line).map_err(|e| DataError::Parse { line: i + 1, msg: e.to_string() })?;
        u.validate().map_err(|e| DataError::Parse { line: i + 1, msg: e.to_string() })?;
        out.push(u);
    }
    Ok(out)
}

pub fn stacked_len(raw: usize, factor: usize) -> usize {
    raw.div_ceil(factor)
}

/// 1-based raw frame index to 1-based stacked index.
pub fn stack_boundary(b: usize, factor: usize) -> usize {
    b.div_ceil(factor)
}

/// Concatenates groups of `factor` frames, zero-padding the last group.
pub fn stack_frames(frames: &[Vec<f64>], factor: usize) -> Vec<Vec<f64>> {
    assert!(factor >= 1, "stack factor must be >= 1");
    let f = frames.first().map_or(0, Vec::len);
    frames
        .chunks(factor)
        .map(|group| {
            let mut row = Vec::with_capacity(f * factor);
            for fr in group {
                row.extend_from_slice(fr);
            }
            row.resize(f * factor, 0.0);
            row
        })
        .collect()
}

/// Label of the last raw frame in each stacked group.
pub fn stack_align(align: &[usize], factor: usize) -> Vec<usize> {
    align.chunks(factor).map(|g| *g.last().expect("non-empty group")).collect()
}

/// One utterance ready for the model: stacked features and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `T' x F*stack`
    pub frames: Tensor,
    pub align: Vec<usize>,
    pub tokens: Vec<usize>,
    pub boundaries: Vec<usize>,
}

impl Sample {
    pub fn from_utterance(u: &Utterance, stack: usize) -> Result<Self, DataError> {
        u.validate()?;
        let stacked = stack_frames(&u.frames, stack);
        let t = stacked.len();
        if u.boundaries.iter().any(|&b| b > t) {
            return Err(DataError::Invalid {
                id: u.id.clone(),
                msg: format!("boundary beyond {t} encoder frames at stack {stack}"),
            });
        }
        let cols = stacked[0].len();
        let frames = Tensor::matrix(t, cols, stacked.into_iter().flatten().collect());
        Ok(Sample {
            id: u.id.clone(),
            frames,
            align: stack_align(&u.align, stack),
            tokens: u.tokens.clone(),
            boundaries: u.boundaries.clone(),
        })
    }

    pub fn steps(&self) -> usize {
        self.frames.rows()
    }
}

pub fn prepare(corpus: &[Utterance], stack: usize) -> Result<Vec<Sample>, DataError> {
    corpus.iter().map(|u| Sample::from_utterance(u, stack)).collect()
}

/// Padded mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `B x T_max x D`
    pub frames: Tensor,
    /// `B x L_max`, PAD-filled.
    pub tokens: Vec<Vec<usize>>,
    pub boundaries: Vec<Vec<usize>>,
    pub align: Vec<Vec<usize>>,
    pub frame_mask: Vec<Vec<bool>>,
    pub token_mask: Vec<Vec<bool>>,
    pub frame_lens: Vec<usize>,
    pub token_lens: Vec<usize>,
}

pub fn batch_pad(items: &[Sample]) -> Batch {
    assert!(!items.is_empty(), "batch_pad needs at least one sample");
    let d = items[0].frames.cols();
    let t_max = items.iter().map(Sample::steps).max().unwrap_or(0);
    let l_max = items.iter().map(|s| s.tokens.len()).max().unwrap_or(0);
    let mut frames = vec![0.0; items.len() * t_max * d];
    for (b, s) in items.iter().enumerate() {
        assert_eq!(s.frames.cols(), d, "feature width differs inside batch");
        let off = b * t_max * d;
        frames[off..off + s.frames.len()].copy_from_slice(s.frames.data());
    }
    let pad = |v: &[usize], n: usize| {
        let mut v = v.to_vec();
        v.resize(n, PAD);
        v
    };
    Batch {
        ids: items.iter().map(|s| s.id.clone()).collect(),
        frames: Tensor::new(vec![items.len(), t_max, d], frames).expect("batch shape"),
        tokens: items.iter().map(|s| pad(&s.tokens, l_max)).collect(),
        boundaries: items.iter().map(|s| pad(&s.boundaries, l_max)).collect(),
        align: items.iter().map(|s| pad(&s.align, t_max)).collect(),
        frame_mask: items.iter().map(|s| (0..t_max).map(|t| t < s.steps()).collect()).collect(),
        token_mask: items.iter().map(|s| (0..l_max).map(|i| i < s.tokens.len()).collect()).collect(),
        frame_lens: items.iter().map(Sample::steps).collect(),
        token_lens: items.iter().map(|s| s.tokens.len()).collect(),
    }
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Item `b` with padding removed.
    pub fn item(&self, b: usize) -> Sample {
        let (t_max, d) = (self.frames.shape()[1], self.frames.shape()[2]);
        let (t, l) = (self.frame_lens[b], self.token_lens[b]);
        let off = b * t_max * d;
        Sample {
            id: self.ids[b].clone(),
            frames: Tensor::matrix(t, d, self.frames.data()[off..off + t * d].to_vec()),
            align: self.align[b][..t].to_vec(),
            tokens: self.tokens[b][..l].to_vec(),
            boundaries: self.boundaries[b][..l].to_vec(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_unit_segments_are_one_hot() {
        let cfg = TaskConfig { n: 5, min_duration: 1, max_duration: 1, noise_std: 0.0, ..TaskConfig::default() };
        for u in gen_segmental_task(&cfg) {
            let n = u.tokens.len() - 1;
            assert_eq!(u.boundaries[..n], (1..=n).collect::<Vec<_>>()[..]);
            for (f, &a) in u.frames.iter().zip(&u.align) {
                let mut expect = vec![0.0; cfg.vocab];
                expect[a] = 1.0;
                assert_eq!(f, &expect);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = TaskConfig { n: 20, lookshift: 1, seed: 9, ..TaskConfig::default() };
        assert_eq!(gen_lookahead_task(&cfg), gen_lookahead_task(&cfg));
    }

    #[test]
    fn zero_lookshift_matches_segmental() {
        let cfg = TaskConfig { n: 10, seed: 4, ..TaskConfig::default() };
        assert_eq!(gen_lookahead_task(&cfg), gen_segmental_task(&cfg));
    }

    #[test]
    fn lookahead_token_combines_neighbours() {
        assert_eq!(lookahead_rule(&[3, 6], 0, 1, 8), (3 + 6) % 8 + FIRST_SYMBOL);
    }

    #[test]
    fn stacking_pads_tail() {
        let frames: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64]).collect();
        let s = stack_frames(&frames, 3);
        assert_eq!(s.len(), 3);
        assert_eq!(s[2], vec![6.0, 0.0, 0.0]);
        assert_eq!(stack_frames(&frames, 1), frames);
        assert_eq!(stack_frames(&[vec![0.0; 80]], 3)[0].len(), 240);
        assert_eq!(stack_boundary(7, 3), 3);
        assert_eq!(stack_boundary(6, 3), 2);
    }

    #[test]
    fn missing_field_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.jsonl");
        std::fs::write(&p, "{\"id\":\"a\",\"frames\":[[1.0]],\"align\":[0],\"tokens\":[1]}\n").unwrap();
        let err = read_jsonl(&p).unwrap_err().to_string();
        assert!(err.contains("line 1") && err.contains("boundaries"), "{err}");
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(read_jsonl(&p).unwrap().is_empty());
    }

    #[test]
    fn batch_round_trips_items() {
        let cfg = TaskConfig { n: 3, seed: 2, ..TaskConfig::default() };
        let samples = prepare(&gen_segmental_task(&cfg), 1).unwrap();
        let b = batch_pad(&samples);
        for (i, s) in samples.iter().enumerate() {
            assert_eq!(&b.item(i), s);
        }
        let single = batch_pad(&samples[..1]);
        assert!(single.frame_mask[0].iter().all(|&m| m));
        assert!(single.token_mask[0].iter().all(|&m| m));
    }
}
