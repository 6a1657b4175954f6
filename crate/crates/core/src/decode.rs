//! Streaming inference over hard monotonic decisions: an incremental encoder,
//! greedy and beam search, and teacher-forced boundary extraction. Every
//! encoder frame consulted for a token is recorded.

use std::path::Path;

use crate::data::Sample;
use crate::mocha::{hard_chunk_weights, THRESHOLD};
use crate::model::{DecoderState, Model, ModelVars, SoftOptions, EOS};
use crate::plot::{AttentionTrace, PlotError};
use crate::tensor::{kernels, Graph, Tensor, Var};

/// Energy parameters copied out of the graph for per-frame evaluation.
struct PlainEnergy {
    w_c: Vec<f64>,
    w_h: Vec<f64>,
    w_s: Vec<f64>,
    b: Vec<f64>,
    gain: Vec<f64>,
    r: f64,
    k: usize,
    feat: usize,
    att: usize,
    hidden: usize,
}

impl PlainEnergy {
    fn new(model: &Model, prefix: &str) -> Self {
        let p = |n: &str| model.params.get(&format!("{prefix}.{n}")).unwrap_or_else(|| panic!("missing {prefix}.{n}"));
        let v = p("v").data();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = p("g").item() / (norm + crate::mocha::NORM_EPS);
        let cfg = &model.config;
        PlainEnergy {
            w_c: p("w_c").data().to_vec(),
            w_h: p("w_h").data().to_vec(),
            w_s: p("w_s").data().to_vec(),
            b: p("b").data().to_vec(),
            gain: v.iter().map(|x| x * scale).collect(),
            r: p("r").item(),
            k: cfg.attention.conv_kernel,
            feat: cfg.encoder.feature_dim(),
            att: cfg.attention.attn_dim,
            hidden: cfg.decoder.hidden,
        }
    }

    fn query(&self, s: &[f64]) -> Vec<f64> {
        let mut q = kernels::matmul(s, &self.w_s, 1, self.hidden, self.att);
        q.iter_mut().zip(&self.b).for_each(|(x, b)| *x += b);
        q
    }

    /// Key at 0-based frame `j` from feature rows; reads rows up to `j + k/2`.
    fn key(&self, rows: &[Vec<f64>], j: usize) -> Vec<f64> {
        let half = self.k / 2;
        let d = self.feat;
        let mut conv = vec![0.0; d];
        for tau in 0..self.k {
            let src = j + tau;
            if src < half || src - half >= rows.len() {
                continue;
            }
            let x = &rows[src - half];
            let wk = &self.w_c[tau * d * d..(tau + 1) * d * d];
            for (o, c) in conv.iter_mut().enumerate() {
                *c += wk[o * d..(o + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        kernels::matmul(&conv, &self.w_h, 1, d, self.att)
    }

    fn energy(&self, key: &[f64], q: &[f64]) -> f64 {
        let mut e = 0.0;
        for a in 0..self.att {
            let pre = key[a] + q[a];
            if pre > 0.0 {
                e += self.gain[a] * pre;
            }
        }
        e + self.r
    }
}

/// Incremental encoder plus the decoder graph for one utterance.
pub struct Stream<'m> {
    model: &'m Model,
    pub g: Graph,
    vars: ModelVars,
    frames: Tensor,
    layer_states: Vec<Var>,
    rows: Vec<Vec<f64>>,
    mono: PlainEnergy,
    chunk: PlainEnergy,
    mono_keys: Vec<Vec<f64>>,
    chunk_keys: Vec<Vec<f64>>,
}

/// Outcome of scanning for one token's boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct Fire {
    pub boundary: Option<usize>,
    /// Highest 1-based encoder frame read while deciding.
    pub max_read: usize,
    /// Selection probabilities of the frames scanned, from the start frame.
    pub probs: Vec<f64>,
}

impl<'m> Stream<'m> {
    pub fn new(model: &'m Model, frames: &Tensor) -> Self {
        assert_eq!(frames.cols(), model.config.encoder.stacked_dim(), "encoder input width");
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let hidden = model.config.encoder.hidden;
        let layer_states = (0..vars.encoder.len()).map(|_| g.constant(Tensor::zeros(&[hidden]))).collect();
        Stream {
            model,
            g,
            vars,
            frames: frames.clone(),
            layer_states,
            rows: Vec::new(),
            mono: PlainEnergy::new(model, "att.mono"),
            chunk: PlainEnergy::new(model, "att.chunk"),
            mono_keys: Vec::new(),
            chunk_keys: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    /// Number of encoder frames computed so far.
    pub fn frames_encoded(&self) -> usize {
        self.rows.len()
    }

    /// Runs the encoder up to 1-based frame `t`.
    fn encode_to(&mut self, t: usize) {
        let t = t.min(self.len());
        while self.rows.len() < t {
            let idx = self.rows.len();
            let g = &mut self.g;
            let mut x = g.constant(Tensor::vector(self.frames.row(idx).to_vec()));
            for (l, p) in self.vars.encoder.iter().enumerate() {
                let o = crate::model::gru_step(g, x, self.layer_states[l], p);
                self.layer_states[l] = o.state;
                x = o.output;
            }
            let feat = match (self.vars.proj_ce, self.vars.proj_s2s) {
                (Some(pc), Some(ps)) => {
                    let a = pc.apply(g, x);
                    let b = ps.apply(g, x);
                    g.concat(&[a, b])
                }
                _ => x,
            };
            self.rows.push(g.data(feat).to_vec());
        }
    }

    fn ensure_keys(&mut self, j: usize) {
        // 1-based frame j needs rows through j + k/2.
        let half = self.model.config.attention.conv_kernel / 2;
        self.encode_to(j + half);
        while self.mono_keys.len() < j {
            let idx = self.mono_keys.len();
            self.mono_keys.push(self.mono.key(&self.rows, idx));
            self.chunk_keys.push(self.chunk.key(&self.rows, idx));
        }
    }

    fn read_bound(&self, j: usize) -> usize {
        (j + self.model.config.attention.conv_kernel / 2).min(self.len())
    }

    /// Scans frames from `start` for the first selection probability at or
    /// above the threshold, given decoder query `s`.
    pub fn fire(&mut self, s: &[f64], start: usize) -> Fire {
        let t = self.len();
        let start = start.max(1);
        let q = self.mono.query(s);
        let mut probs = Vec::new();
        let mut max_read = 0;
        for j in start..=t {
            self.ensure_keys(j);
            max_read = max_read.max(self.read_bound(j));
            let p = kernels::sigmoid(self.mono.energy(&self.mono_keys[j - 1], &q));
            probs.push(p);
            if p >= THRESHOLD {
                return Fire { boundary: Some(j), max_read, probs };
            }
        }
        Fire { boundary: None, max_read, probs }
    }

    /// Context over the chunk window ending at `boundary`; zero when the
    /// mechanism did not fire.
    pub fn context(&mut self, s: &[f64], boundary: Option<usize>) -> Vec<f64> {
        let d = self.model.config.encoder.feature_dim();
        let Some(b) = boundary else { return vec![0.0; d] };
        self.ensure_keys(b);
        let q = self.chunk.query(s);
        let u: Vec<f64> = self.chunk_keys[..b].iter().map(|k| self.chunk.energy(k, &q)).collect();
        let w = hard_chunk_weights(&u, b, self.model.config.attention.chunk_width);
        let lo = b - w.len();
        let mut c = vec![0.0; d];
        for (wk, row) in w.iter().zip(&self.rows[lo..b]) {
            c.iter_mut().zip(row).for_each(|(c, h)| *c += wk * h);
        }
        c
    }

    pub fn initial_state(&mut self) -> DecoderState {
        self.model.initial_state(&mut self.g)
    }

    /// One decoder step; returns the new state and log probabilities.
    pub fn step(&mut self, y_prev: usize, state: &DecoderState, c: &[f64]) -> (DecoderState, Vec<f64>) {
        let cv = self.g.constant(Tensor::vector(c.to_vec()));
        let (next, logits) = self.model.decode_step(&mut self.g, &self.vars, y_prev, state, cv, None);
        let mut lp = self.g.data(logits).to_vec();
        kernels::log_softmax_in_place(&mut lp);
        (next, lp)
    }

    pub fn query_of(&self, state: &DecoderState) -> Vec<f64> {
        self.g.data(state.top).to_vec()
    }
}

#[derive(Clone, Debug)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub boundaries: Vec<usize>,
    pub log_prob: f64,
    pub state: DecoderState,
    pub complete: bool,
}

impl Hypothesis {
    pub fn score(&self, length_penalty: f64) -> f64 {
        self.log_prob + length_penalty * self.tokens.len() as f64
    }

    fn last_boundary(&self) -> usize {
        self.boundaries.last().copied().unwrap_or(1)
    }
}

/// Highest encoder frame read before each emitted token.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameAccessLog {
    pub max_read: Vec<usize>,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = k;
        }
    }
    best
}

/// Greedy streaming decode. A step that never fires ends the hypothesis
/// with EOS at the last frame.
pub fn greedy_stream_decode(model: &Model, frames: &Tensor, max_len: usize) -> (Hypothesis, FrameAccessLog) {
    assert!(max_len >= 1, "max_len must be >= 1");
    let mut st = Stream::new(model, frames);
    let t = st.len();
    let mut state = st.initial_state();
    let mut hyp = Hypothesis { tokens: vec![], boundaries: vec![], log_prob: 0.0, state: state.clone(), complete: false };
    let mut log = FrameAccessLog::default();
    let mut y_prev = EOS;
    while hyp.tokens.len() < max_len {
        let s = st.query_of(&state);
        let fire = st.fire(&s, hyp.last_boundary());
        log.max_read.push(fire.max_read);
        let Some(b) = fire.boundary else {
            hyp.tokens.push(EOS);
            hyp.boundaries.push(t);
            hyp.complete = true;
            break;
        };
        let c = st.context(&s, Some(b));
        let (next, lp) = st.step(y_prev, &state, &c);
        let y = argmax(&lp);
        hyp.tokens.push(y);
        hyp.boundaries.push(b);
        hyp.log_prob += lp[y];
        state = next;
        y_prev = y;
        if y == EOS {
            hyp.complete = true;
            break;
        }
    }
    hyp.state = state;
    (hyp, log)
}

#[derive(Clone, Copy, Debug)]
pub struct BeamOptions {
    pub beam: usize,
    pub max_len: usize,
    pub length_penalty: f64,
}

/// Token-synchronous beam search; each hypothesis keeps its own boundary
/// pointer. Results of every narrower width are merged in, so the best score
/// never drops as the beam grows. Returns distinct hypotheses best first.
pub fn beam_stream_decode(model: &Model, frames: &Tensor, opts: &BeamOptions) -> Vec<Hypothesis> {
    assert!(opts.beam >= 1, "beam must be >= 1");
    assert!(opts.max_len >= 1, "max_len must be >= 1");
    let mut st = Stream::new(model, frames);
    let mut all: Vec<Hypothesis> = Vec::new();
    for width in 1..=opts.beam {
        for h in beam_pass(&mut st, width, opts) {
            if !all.iter().any(|o| o.tokens == h.tokens && o.boundaries == h.boundaries) {
                all.push(h);
            }
        }
    }
    all.sort_by(|a, b| b.score(opts.length_penalty).total_cmp(&a.score(opts.length_penalty)));
    all
}

fn beam_pass(st: &mut Stream, width: usize, opts: &BeamOptions) -> Vec<Hypothesis> {
    let t = st.len();
    let init = st.initial_state();
    let mut live = vec![Hypothesis { tokens: vec![], boundaries: vec![], log_prob: 0.0, state: init, complete: false }];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..opts.max_len {
        let mut cands: Vec<(Hypothesis, Option<(usize, usize, DecoderState)>)> = Vec::new();
        for h in &live {
            let s = st.query_of(&h.state);
            let fire = st.fire(&s, h.last_boundary());
            let Some(b) = fire.boundary else {
                let mut f = h.clone();
                f.tokens.push(EOS);
                f.boundaries.push(t);
                f.complete = true;
                cands.push((f, None));
                continue;
            };
            let c = st.context(&s, Some(b));
            let y_prev = h.tokens.last().copied().unwrap_or(EOS);
            let (next, lp) = st.step(y_prev, &h.state, &c);
            let mut order: Vec<usize> = (0..lp.len()).collect();
            order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]));
            for &y in order.iter().take(width) {
                let mut n = h.clone();
                n.log_prob += lp[y];
                cands.push((n, Some((y, b, next.clone()))));
            }
        }
        cands.sort_by(|a, b| b.0.score(opts.length_penalty).total_cmp(&a.0.score(opts.length_penalty)));
        live.clear();
        for (mut h, ext) in cands.into_iter().take(width) {
            match ext {
                None => done.push(h),
                Some((y, b, state)) => {
                    h.tokens.push(y);
                    h.boundaries.push(b);
                    h.state = state;
                    if y == EOS {
                        h.complete = true;
                        done.push(h);
                    } else {
                        live.push(h);
                    }
                }
            }
        }
        if live.is_empty() {
            break;
        }
    }
    done.extend(live);
    done
}

/// Teacher-forced hard decisions for gold `tokens`.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherForced {
    /// Predicted boundaries; un-fired tokens get the last frame.
    pub boundaries: Vec<usize>,
    pub fired: Vec<bool>,
    pub access: FrameAccessLog,
    /// Argmax of each step's distribution.
    pub predictions: Vec<usize>,
}

pub fn teacher_forced(model: &Model, frames: &Tensor, tokens: &[usize]) -> TeacherForced {
    let mut st = Stream::new(model, frames);
    let t = st.len();
    let mut state = st.initial_state();
    let mut y_prev = EOS;
    let mut start = 1;
    let mut out = TeacherForced { boundaries: vec![], fired: vec![], access: FrameAccessLog::default(), predictions: vec![] };
    for &y in tokens {
        let s = st.query_of(&state);
        let fire = st.fire(&s, start);
        out.access.max_read.push(fire.max_read);
        let c = st.context(&s, fire.boundary);
        let b = fire.boundary.unwrap_or(t);
        out.boundaries.push(b);
        out.fired.push(fire.boundary.is_some());
        let (next, lp) = st.step(y_prev, &state, &c);
        out.predictions.push(argmax(&lp));
        state = next;
        y_prev = y;
        start = b;
    }
    out
}

/// Expected alignment of a teacher-forced evaluation pass, with the hard
/// teacher-forced boundaries and the gold ones.
pub fn attention_trace(model: &Model, sample: &Sample) -> AttentionTrace {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false);
    let opts = SoftOptions { train: false, delay_constraint: None };
    let fwd = model.forward_soft(&mut g, &vars, &sample.frames, &sample.tokens, &opts, None);
    let alpha = fwd.alpha.iter().map(|&a| g.data(a).to_vec()).collect();
    let tf = teacher_forced(model, &sample.frames, &sample.tokens);
    AttentionTrace { id: sample.id.clone(), alpha, predicted: tf.boundaries, gold: sample.boundaries.clone() }
}

/// Writes the trace of `sample` as `<stem>.csv`, `<stem>.svg` and `<stem>.json`.
pub fn export_attention_trace(model: &Model, sample: &Sample, stem: &Path) -> Result<AttentionTrace, PlotError> {
    let tr = attention_trace(model, sample);
    tr.write(stem)?;
    Ok(tr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny(seed: u64) -> Model {
        let mut c = ModelConfig::desk(3, 3, 5);
        c.encoder.hidden = 6;
        c.decoder.hidden = 5;
        c.decoder.embed_dim = 3;
        c.attention.attn_dim = 4;
        Model::init(c, seed)
    }

    fn frames(t: usize) -> Tensor {
        Tensor::matrix(t, 3, (0..t * 3).map(|i| ((i * 7) % 5) as f64 * 0.3 - 0.5).collect())
    }

    fn set_offset(m: &mut Model, r: f64) {
        m.params.get_mut("att.mono.r").unwrap().data_mut()[0] = r;
    }

    #[test]
    fn never_firing_ends_at_last_frame() {
        let mut m = tiny(1);
        set_offset(&mut m, -1e3);
        let tf = teacher_forced(&m, &frames(6), &[2, 3, EOS]);
        assert_eq!(tf.boundaries, vec![6, 6, 6]);
        let (h, _) = greedy_stream_decode(&m, &frames(6), 5);
        assert_eq!(h.tokens, vec![EOS]);
        assert_eq!(h.boundaries, vec![6]);
    }

    #[test]
    fn always_firing_stays_on_first_frame() {
        let mut m = tiny(1);
        set_offset(&mut m, 1e3);
        let tf = teacher_forced(&m, &frames(6), &[2, 3, EOS]);
        assert_eq!(tf.boundaries, vec![1, 1, 1]);
        assert_eq!(tf.access.max_read, vec![3, 3, 3]);
    }

    #[test]
    fn encoder_runs_lazily() {
        let mut m = tiny(2);
        set_offset(&mut m, 1e3);
        let mut st = Stream::new(&m, &frames(8));
        let s = vec![0.0; 5];
        let f = st.fire(&s, 2);
        assert_eq!(f.boundary, Some(2));
        assert_eq!(st.frames_encoded(), 4);
    }

    #[test]
    fn greedy_is_repeatable_and_beam_one_matches() {
        let m = tiny(5);
        let x = frames(9);
        let (a, la) = greedy_stream_decode(&m, &x, 6);
        let (b, lb) = greedy_stream_decode(&m, &x, 6);
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(la, lb);
        let beams = beam_stream_decode(&m, &x, &BeamOptions { beam: 1, max_len: 6, length_penalty: 0.0 });
        assert_eq!(beams[0].tokens, a.tokens);
        assert_eq!(beams[0].boundaries, a.boundaries);
        assert_eq!(beams[0].log_prob, a.log_prob);
    }
}
