//! Encoder/decoder networks around the monotonic attention: a unidirectional
//! GRU encoder with layer normalization and optional multi-task projection
//! branches, a GRU decoder with embedding and output layers, and the
//! label-smoothed cross-entropy used to train it.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mocha::{self, EnergyVars, Recursion};
use crate::tensor::{Graph, Tensor, Var};

/// Reserved padding id.
pub const PAD: usize = 0;
/// Reserved end-of-sentence id; also used as the start symbol.
pub const EOS: usize = 1;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    /// Raw feature dimension before frame stacking.
    pub input_dim: usize,
    pub frame_stack: usize,
    /// Two linear bottleneck projections on top of the encoder (CE branch and
    /// S2S branch) whose outputs are concatenated for the attention.
    pub mtl_branch: bool,
    pub bottleneck_dim: usize,
    /// Framewise classification head over `align_classes` labels.
    pub ce_head: bool,
    pub align_classes: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn stacked_dim(&self) -> usize {
        self.input_dim * self.frame_stack
    }

    /// Width of the features the attention reads.
    pub fn feature_dim(&self) -> usize {
        if self.mtl_branch {
            2 * self.bottleneck_dim
        } else {
            self.hidden
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    /// Output vocabulary including PAD and EOS.
    pub vocab: usize,
    pub label_smoothing: f64,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionConfig {
    pub attn_dim: usize,
    /// Odd kernel width of the key convolution; lookahead is `conv_kernel / 2`.
    pub conv_kernel: usize,
    pub chunk_width: usize,
    /// Clipping applied to selection probabilities inside the denominators of
    /// the parallel alignment recursion.
    pub clip_eps: f64,
    /// Std of the pre-sigmoid Gaussian noise used while training.
    pub noise_std: f64,
    /// Initial value of the monotonic energy offset.
    pub init_offset: f64,
    #[serde(default)]
    pub recursion: Recursion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub attention: AttentionConfig,
}

impl ModelConfig {
    /// Desk-scale defaults for a task with `alphabet` segment symbols and
    /// `vocab` output ids.
    pub fn desk(input_dim: usize, alphabet: usize, vocab: usize) -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                layers: 2,
                hidden: 64,
                input_dim,
                frame_stack: 1,
                mtl_branch: false,
                bottleneck_dim: 32,
                ce_head: false,
                align_classes: alphabet,
                dropout: 0.1,
            },
            decoder: DecoderConfig {
                layers: 1,
                hidden: 64,
                embed_dim: 32,
                vocab,
                label_smoothing: 0.2,
                dropout: 0.1,
            },
            attention: AttentionConfig {
                attn_dim: 32,
                conv_kernel: 5,
                chunk_width: 4,
                clip_eps: 1e-6,
                noise_std: 1.0,
                init_offset: -4.0,
                recursion: Recursion::Sequential,
            },
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let e = &self.encoder;
        if e.layers < 1 {
            return Err("encoder.layers must be >= 1".into());
        }
        if e.frame_stack < 1 {
            return Err("encoder.frame_stack must be >= 1".into());
        }
        if e.mtl_branch && e.bottleneck_dim == 0 {
            return Err("encoder.bottleneck_dim must be > 0 with mtl_branch".into());
        }
        if self.decoder.layers < 1 {
            return Err("decoder.layers must be >= 1".into());
        }
        if self.decoder.vocab <= EOS {
            return Err("decoder.vocab must include PAD and EOS".into());
        }
        if !(0.0..1.0).contains(&self.decoder.label_smoothing) {
            return Err("decoder.label_smoothing must be in [0, 1)".into());
        }
        if self.attention.conv_kernel % 2 == 0 {
            return Err("attention.conv_kernel must be odd".into());
        }
        if self.attention.chunk_width < 1 {
            return Err("attention.chunk_width must be >= 1".into());
        }
        Ok(())
    }
}

/// Named parameter collection. Iteration order is the name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }
}

/// A parameter store bound into a graph.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Binds every parameter; those for which `trainable` holds become leaves,
    /// the rest constants.
    pub fn bind(g: &mut Graph, params: &ParamStore, trainable: impl Fn(&str) -> bool) -> Self {
        let vars = params
            .iter()
            .map(|(n, t)| {
                let v = if trainable(n) { g.leaf(t.clone()) } else { g.constant(t.clone()) };
                (n.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients of every bound parameter after a backward pass; parameters
    /// the pass never reached get zeros.
    pub fn grads(&self, g: &Graph) -> BTreeMap<String, Vec<f64>> {
        self.vars
            .iter()
            .map(|(n, &v)| {
                let grad = g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).len()]);
                (n.clone(), grad)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b_ih: Var,
    pub b_hh: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
    pub hidden: usize,
}

impl GruVars {
    fn from_bound(b: &Bound, prefix: &str, hidden: usize) -> Self {
        GruVars {
            w_ih: b.get(&format!("{prefix}.w_ih")),
            w_hh: b.get(&format!("{prefix}.w_hh")),
            b_ih: b.get(&format!("{prefix}.b_ih")),
            b_hh: b.get(&format!("{prefix}.b_hh")),
            ln_gain: b.get(&format!("{prefix}.ln_gain")),
            ln_bias: b.get(&format!("{prefix}.ln_bias")),
            hidden,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: Var,
    pub b: Var,
}

impl Linear {
    fn from_bound(b: &Bound, prefix: &str) -> Self {
        Linear { w: b.get(&format!("{prefix}.w")), b: b.get(&format!("{prefix}.b")) }
    }

    /// Works on a vector or on the rows of a matrix.
    pub fn apply(&self, g: &mut Graph, x: Var) -> Var {
        let y = g.matmul(x, self.w);
        if g.value(x).shape().len() == 2 {
            g.add_row(y, self.b)
        } else {
            g.add(y, self.b)
        }
    }
}

/// Typed handles to every model parameter inside one graph.
pub struct ModelVars {
    pub encoder: Vec<GruVars>,
    pub proj_ce: Option<Linear>,
    pub proj_s2s: Option<Linear>,
    pub ce_out: Option<Linear>,
    pub mono: EnergyVars,
    pub chunk: EnergyVars,
    pub embed: Var,
    pub decoder: Vec<GruVars>,
    pub out_hidden: Linear,
    pub out: Linear,
    pub bound: Bound,
}

/// Output of one GRU cell update.
#[derive(Clone, Copy, Debug)]
pub struct GruOut {
    /// Recurrent state carried to the next step.
    pub state: Var,
    /// Layer-normalized state passed to the layer above.
    pub output: Var,
}

/// GRU update from precomputed input-gate pre-activations `gi = x W_ih + b_ih`.
pub fn gru_cell(g: &mut Graph, gi: Var, h: Var, p: &GruVars) -> GruOut {
    let n_h = p.hidden;
    let gh0 = g.matmul(h, p.w_hh);
    let gh = g.add(gh0, p.b_hh);
    let (gi_r, gh_r) = (g.slice(gi, 0, n_h), g.slice(gh, 0, n_h));
    let (gi_z, gh_z) = (g.slice(gi, n_h, n_h), g.slice(gh, n_h, n_h));
    let (gi_n, gh_n) = (g.slice(gi, 2 * n_h, n_h), g.slice(gh, 2 * n_h, n_h));
    let r_pre = g.add(gi_r, gh_r);
    let r = g.sigmoid(r_pre);
    let z_pre = g.add(gi_z, gh_z);
    let z = g.sigmoid(z_pre);
    let rn = g.mul(r, gh_n);
    let n_pre = g.add(gi_n, rn);
    let n = g.tanh(n_pre);
    // h' = (1 - z) * n + z * h = n + z * (h - n)
    let diff = g.sub(h, n);
    let zd = g.mul(z, diff);
    let state = g.add(n, zd);
    let output = g.layer_norm(state, p.ln_gain, p.ln_bias, LN_EPS);
    GruOut { state, output }
}

/// One GRU step on input vector `x`.
pub fn gru_step(g: &mut Graph, x: Var, h: Var, p: &GruVars) -> GruOut {
    let gi0 = g.matmul(x, p.w_ih);
    let gi = g.add(gi0, p.b_ih);
    gru_cell(g, gi, h, p)
}

fn dropout(g: &mut Graph, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 - rate;
            let mask: Vec<f64> = (0..g.value(x).len())
                .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            g.mul_const(x, &mask)
        }
        _ => x,
    }
}

/// Encoder outputs for one utterance.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// Top GRU layer outputs, `T' x hidden`.
    pub h: Var,
    pub ce_logits: Option<Var>,
    /// Features read by the attention, `T' x feature_dim`.
    pub features: Var,
}

/// Decoder recurrent state.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub layers: Vec<Var>,
    /// Normalized top-layer output; the attention query for the next token.
    pub top: Var,
}

/// Encoder, attention and decoder parameters plus their configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn fan_in_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    uniform(rng, shape, 1.0 / (fan_in.max(1) as f64).sqrt())
}

fn add_gru(ps: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, input: usize, hidden: usize) {
    ps.insert(format!("{prefix}.w_ih"), fan_in_uniform(rng, &[input, 3 * hidden], input));
    ps.insert(format!("{prefix}.w_hh"), fan_in_uniform(rng, &[hidden, 3 * hidden], hidden));
    ps.insert(format!("{prefix}.b_ih"), Tensor::zeros(&[3 * hidden]));
    ps.insert(format!("{prefix}.b_hh"), Tensor::zeros(&[3 * hidden]));
    ps.insert(format!("{prefix}.ln_gain"), Tensor::vector(vec![1.0; hidden]));
    ps.insert(format!("{prefix}.ln_bias"), Tensor::zeros(&[hidden]));
}

fn add_linear(ps: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, input: usize, output: usize) {
    ps.insert(format!("{prefix}.w"), fan_in_uniform(rng, &[input, output], input));
    ps.insert(format!("{prefix}.b"), Tensor::zeros(&[output]));
}

impl Model {
    /// Fresh parameters: fan-in scaled uniform matrices, zero biases, unit
    /// layer-norm gains, and the configured monotonic offset.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        config.validate().unwrap_or_else(|e| panic!("invalid model config: {e}"));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let e = &config.encoder;
        let mut input = e.stacked_dim();
        for l in 0..e.layers {
            add_gru(&mut ps, &mut rng, &format!("enc.{l}"), input, e.hidden);
            input = e.hidden;
        }
        if e.mtl_branch {
            add_linear(&mut ps, &mut rng, "enc.proj_ce", e.hidden, e.bottleneck_dim);
            add_linear(&mut ps, &mut rng, "enc.proj_s2s", e.hidden, e.bottleneck_dim);
        }
        if e.ce_head {
            let src = if e.mtl_branch { e.bottleneck_dim } else { e.hidden };
            add_linear(&mut ps, &mut rng, "ce.out", src, e.align_classes);
        }
        let feat = e.feature_dim();
        let a = &config.attention;
        let d = &config.decoder;
        for (name, offset) in [("att.mono", a.init_offset), ("att.chunk", 0.0)] {
            ps.insert(format!("{name}.g"), Tensor::scalar(1.0));
            ps.insert(format!("{name}.v"), fan_in_uniform(&mut rng, &[a.attn_dim], a.attn_dim));
            ps.insert(format!("{name}.w_h"), fan_in_uniform(&mut rng, &[feat, a.attn_dim], feat));
            ps.insert(format!("{name}.w_s"), fan_in_uniform(&mut rng, &[d.hidden, a.attn_dim], d.hidden));
            ps.insert(format!("{name}.b"), Tensor::zeros(&[a.attn_dim]));
            ps.insert(format!("{name}.r"), Tensor::scalar(offset));
            ps.insert(
                format!("{name}.w_c"),
                fan_in_uniform(&mut rng, &[a.conv_kernel, feat, feat], a.conv_kernel * feat),
            );
        }
        ps.insert("dec.embed", fan_in_uniform(&mut rng, &[d.vocab, d.embed_dim], d.embed_dim));
        let mut input = d.embed_dim + feat;
        for l in 0..d.layers {
            add_gru(&mut ps, &mut rng, &format!("dec.{l}"), input, d.hidden);
            input = d.hidden;
        }
        add_linear(&mut ps, &mut rng, "dec.out_hidden", d.hidden + feat, d.hidden);
        add_linear(&mut ps, &mut rng, "dec.out", d.hidden, d.vocab);
        Model { config, params: ps }
    }

    /// Copy with every parameter rounded to 32-bit precision.
    pub fn rounded_to_f32(&self) -> Self {
        let mut m = self.clone();
        for (_, t) in m.params.iter_mut() {
            for x in t.data_mut() {
                *x = *x as f32 as f64;
            }
        }
        m
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ModelVars {
        self.bind_with(g, |_| trainable)
    }

    pub fn bind_with(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> ModelVars {
        let bound = Bound::bind(g, &self.params, trainable);
        let e = &self.config.encoder;
        let d = &self.config.decoder;
        let encoder = (0..e.layers).map(|l| GruVars::from_bound(&bound, &format!("enc.{l}"), e.hidden)).collect();
        let decoder = (0..d.layers).map(|l| GruVars::from_bound(&bound, &format!("dec.{l}"), d.hidden)).collect();
        let opt_linear = |name: &str| bound.try_get(&format!("{name}.w")).map(|_| Linear::from_bound(&bound, name));
        ModelVars {
            encoder,
            proj_ce: if e.mtl_branch { opt_linear("enc.proj_ce") } else { None },
            proj_s2s: if e.mtl_branch { opt_linear("enc.proj_s2s") } else { None },
            ce_out: if e.ce_head { opt_linear("ce.out") } else { None },
            mono: EnergyVars::from_bound(&bound, "att.mono"),
            chunk: EnergyVars::from_bound(&bound, "att.chunk"),
            embed: bound.get("dec.embed"),
            decoder,
            out_hidden: Linear::from_bound(&bound, "dec.out_hidden"),
            out: Linear::from_bound(&bound, "dec.out"),
            bound,
        }
    }

    /// Runs the GRU stack left to right over stacked frames (`T' x F*stack`).
    pub fn encode(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        frames: &Tensor,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Encoded {
        let e = &self.config.encoder;
        assert_eq!(frames.cols(), e.stacked_dim(), "encoder input width");
        let steps = frames.rows();
        let mut x = g.constant(frames.clone());
        for (l, p) in vars.encoder.iter().enumerate() {
            let gi_all0 = g.matmul(x, p.w_ih);
            let gi_all = g.add_row(gi_all0, p.b_ih);
            let mut h = g.constant(Tensor::zeros(&[e.hidden]));
            let mut outs = Vec::with_capacity(steps);
            for t in 0..steps {
                let gi = g.row(gi_all, t);
                let o = gru_cell(g, gi, h, p);
                h = o.state;
                outs.push(o.output);
            }
            x = g.stack_rows(&outs);
            if l + 1 < vars.encoder.len() {
                x = dropout(g, x, e.dropout, rng.as_deref_mut());
            }
        }
        let h = x;
        match (vars.proj_ce, vars.proj_s2s) {
            (Some(pc), Some(ps)) => {
                let ce_feat = pc.apply(g, h);
                let s2s_feat = ps.apply(g, h);
                let ce_logits = vars.ce_out.map(|o| o.apply(g, ce_feat));
                let features = g.concat_cols(&[ce_feat, s2s_feat]);
                Encoded { h, ce_logits, features }
            }
            _ => {
                let ce_logits = vars.ce_out.map(|o| o.apply(g, h));
                Encoded { h, ce_logits, features: h }
            }
        }
    }

    pub fn initial_state(&self, g: &mut Graph) -> DecoderState {
        let d = &self.config.decoder;
        let layers = (0..d.layers).map(|_| g.constant(Tensor::zeros(&[d.hidden]))).collect();
        let top = g.constant(Tensor::zeros(&[d.hidden]));
        DecoderState { layers, top }
    }

    /// Embeds `y_prev`, feeds it with context `c` through the decoder GRU
    /// stack and returns the new state and logits over the vocabulary.
    pub fn decode_step(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        y_prev: usize,
        state: &DecoderState,
        c: Var,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (DecoderState, Var) {
        let d = &self.config.decoder;
        assert!(y_prev < d.vocab, "token id {y_prev} out of vocabulary {}", d.vocab);
        let emb = g.slice(vars.embed, y_prev * d.embed_dim, d.embed_dim);
        let mut x = g.concat(&[emb, c]);
        let mut layers = Vec::with_capacity(d.layers);
        for (l, p) in vars.decoder.iter().enumerate() {
            let o = gru_step(g, x, state.layers[l], p);
            layers.push(o.state);
            x = o.output;
            if l + 1 < vars.decoder.len() {
                x = dropout(g, x, d.dropout, rng.as_deref_mut());
            }
        }
        let top = x;
        let sc = g.concat(&[top, c]);
        let hid0 = vars.out_hidden.apply(g, sc);
        let hid = g.tanh(hid0);
        let logits = vars.out.apply(g, hid);
        (DecoderState { layers, top }, logits)
    }
}

fn gate<'a>(on: bool, rng: &'a mut Option<&mut ChaCha8Rng>) -> Option<&'a mut ChaCha8Rng> {
    if on {
        rng.as_deref_mut()
    } else {
        None
    }
}

/// Options for one teacher-forced soft forward pass.
#[derive(Clone, Debug, Default)]
pub struct SoftOptions {
    pub train: bool,
    /// Zero alignment mass beyond `boundary + delta` (1-based boundaries).
    pub delay_constraint: Option<(Vec<usize>, usize)>,
}

/// Everything a training objective needs from a teacher-forced soft pass.
pub struct SoftForward {
    pub encoded: Encoded,
    /// `L x K`
    pub logits: Var,
    pub p: Vec<Var>,
    pub alpha: Vec<Var>,
    pub beta: Vec<Var>,
    pub frames: usize,
}

impl Model {
    /// Teacher-forced pass with the marginalized (soft) monotonic alignment.
    /// `tokens` are the gold outputs, EOS-terminated.
    pub fn forward_soft(
        &self,
        g: &mut Graph,
        vars: &ModelVars,
        frames: &Tensor,
        tokens: &[usize],
        opts: &SoftOptions,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> SoftForward {
        assert!(!tokens.is_empty(), "forward_soft needs at least one token");
        let a = &self.config.attention;
        let encoded = self.encode(g, vars, frames, gate(opts.train, &mut rng));
        let t = frames.rows();
        let keys_mono = mocha::energy_keys(g, encoded.features, &vars.mono);
        let keys_chunk = mocha::energy_keys(g, encoded.features, &vars.chunk);
        let gain_mono = mocha::normalized_gain(g, &vars.mono);
        let gain_chunk = mocha::normalized_gain(g, &vars.chunk);
        let mut state = self.initial_state(g);
        let mut alpha_prev = mocha::initial_alignment(g, t);
        let mut y_prev = EOS;
        let (mut ps, mut alphas, mut betas, mut logits) = (vec![], vec![], vec![], vec![]);
        let noise_std = if opts.train { a.noise_std } else { 0.0 };
        for (i, &y) in tokens.iter().enumerate() {
            let e = mocha::energy_from_keys(g, keys_mono, state.top, &vars.mono, gain_mono);
            let p = mocha::selection_probs(g, e, noise_std, gate(opts.train, &mut rng));
            let mut alpha = mocha::expected_alignment_step(g, p, alpha_prev, a.recursion, a.clip_eps);
            if let Some((bounds, delta)) = &opts.delay_constraint {
                alpha = mocha::apply_delay_mask(g, alpha, bounds[i], *delta);
            }
            let u = mocha::energy_from_keys(g, keys_chunk, state.top, &vars.chunk, gain_chunk);
            let beta = mocha::chunkwise_attention(g, alpha, u, a.chunk_width);
            let c = mocha::context_vector(g, beta, encoded.features);
            let (next, lg) = self.decode_step(g, vars, y_prev, &state, c, gate(opts.train, &mut rng));
            state = next;
            y_prev = y;
            alpha_prev = alpha;
            ps.push(p);
            alphas.push(alpha);
            betas.push(beta);
            logits.push(lg);
        }
        let logits = g.stack_rows(&logits);
        SoftForward { encoded, logits, p: ps, alpha: alphas, beta: betas, frames: t }
    }
}

/// Mean cross-entropy of `logits` (`L x K`) against targets smoothed to
/// `1 - eps` on the gold id and `eps / (K - 1)` elsewhere. PAD targets are
/// skipped; an all-PAD target gives 0.
pub fn label_smoothed_ce(g: &mut Graph, logits: Var, targets: &[usize], eps: f64) -> Var {
    assert!((0.0..1.0).contains(&eps), "label smoothing must be in [0, 1)");
    let k = g.value(logits).cols();
    let rows = g.value(logits).rows();
    assert_eq!(rows, targets.len(), "one target per logits row");
    let valid = targets.iter().filter(|&&t| t != PAD).count();
    if valid == 0 {
        return g.constant(Tensor::scalar(0.0));
    }
    let off = if k > 1 { eps / (k - 1) as f64 } else { 0.0 };
    let mut w = vec![0.0; rows * k];
    for (r, &t) in targets.iter().enumerate() {
        if t == PAD {
            continue;
        }
        assert!(t < k, "target {t} out of vocabulary {k}");
        let row = &mut w[r * k..(r + 1) * k];
        row.iter_mut().for_each(|x| *x = off);
        row[t] = 1.0 - eps;
    }
    let lsm = g.log_softmax(logits);
    let weighted = g.mul_const(lsm, &w);
    let s = g.sum(weighted);
    g.scale(s, -1.0 / valid as f64)
}

/// Mean framewise cross-entropy of `logits` (`T' x K_align`) against `labels`.
pub fn framewise_ce(g: &mut Graph, logits: Var, labels: &[usize]) -> Var {
    let k = g.value(logits).cols();
    let rows = g.value(logits).rows();
    assert_eq!(rows, labels.len(), "one label per frame");
    let mut w = vec![0.0; rows * k];
    for (r, &a) in labels.iter().enumerate() {
        assert!(a < k, "alignment label {a} out of range {k}");
        w[r * k + a] = 1.0;
    }
    let lsm = g.log_softmax(logits);
    let picked = g.mul_const(lsm, &w);
    let s = g.sum(picked);
    g.scale(s, -1.0 / rows.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        let mut c = ModelConfig::desk(4, 4, 6);
        c.encoder.hidden = 6;
        c.encoder.bottleneck_dim = 3;
        c.decoder.hidden = 5;
        c.decoder.embed_dim = 3;
        c.attention.attn_dim = 4;
        c
    }

    #[test]
    fn zero_weights_give_zero_state() {
        let mut g = Graph::new();
        let p = GruVars {
            w_ih: g.constant(Tensor::zeros(&[3, 6])),
            w_hh: g.constant(Tensor::zeros(&[2, 6])),
            b_ih: g.constant(Tensor::zeros(&[6])),
            b_hh: g.constant(Tensor::zeros(&[6])),
            ln_gain: g.constant(Tensor::zeros(&[2])),
            ln_bias: g.constant(Tensor::zeros(&[2])),
            hidden: 2,
        };
        let x = g.constant(Tensor::vector(vec![0.5, -1.0, 2.0]));
        let h = g.constant(Tensor::zeros(&[2]));
        let o = gru_step(&mut g, x, h, &p);
        assert_eq!(g.data(o.state), &[0.0, 0.0]);
        assert_eq!(g.data(o.output), &[0.0, 0.0]);
    }

    #[test]
    fn saturated_update_gate_keeps_state() {
        let mut g = Graph::new();
        let mut b_ih = vec![0.0; 6];
        b_ih[2] = 1e3;
        b_ih[3] = 1e3;
        let p = GruVars {
            w_ih: g.constant(Tensor::matrix(1, 6, vec![0.3, -0.2, 0.0, 0.0, 0.7, 0.1])),
            w_hh: g.constant(Tensor::matrix(2, 6, vec![0.1; 12])),
            b_ih: g.constant(Tensor::vector(b_ih)),
            b_hh: g.constant(Tensor::zeros(&[6])),
            ln_gain: g.constant(Tensor::vector(vec![1.0; 2])),
            ln_bias: g.constant(Tensor::zeros(&[2])),
            hidden: 2,
        };
        let x = g.constant(Tensor::vector(vec![0.9]));
        let h = g.constant(Tensor::vector(vec![0.25, -0.75]));
        let o = gru_step(&mut g, x, h, &p);
        assert_eq!(g.data(o.state), &[0.25, -0.75]);
    }

    #[test]
    fn zero_output_weights_give_uniform_logits() {
        let mut model = Model::init(tiny_config(), 3);
        for n in ["dec.out.w", "dec.out.b"] {
            model.params.get_mut(n).unwrap().data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let st = model.initial_state(&mut g);
        let c = g.constant(Tensor::vector(vec![0.1; model.config.encoder.feature_dim()]));
        let (_, logits) = model.decode_step(&mut g, &vars, EOS, &st, c, None);
        assert!(g.data(logits).iter().all(|&x| x == 0.0));
    }

    #[test]
    #[should_panic(expected = "out of vocabulary")]
    fn decode_step_rejects_unknown_token() {
        let model = Model::init(tiny_config(), 3);
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let st = model.initial_state(&mut g);
        let c = g.constant(Tensor::vector(vec![0.0; model.config.encoder.feature_dim()]));
        model.decode_step(&mut g, &vars, 6, &st, c, None);
    }

    #[test]
    fn mtl_branch_doubles_bottleneck() {
        let mut cfg = tiny_config();
        cfg.encoder.mtl_branch = true;
        cfg.encoder.ce_head = true;
        let model = Model::init(cfg, 1);
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let frames = Tensor::matrix(3, 4, vec![0.1; 12]);
        let enc = model.encode(&mut g, &vars, &frames, None);
        assert_eq!(g.value(enc.features).shape(), &[3, 6]);
        assert_eq!(g.value(enc.ce_logits.unwrap()).shape(), &[3, 4]);
    }

    #[test]
    fn single_frame_encodes_to_one_row() {
        let model = Model::init(tiny_config(), 1);
        let mut g = Graph::new();
        let vars = model.bind(&mut g, false);
        let enc = model.encode(&mut g, &vars, &Tensor::matrix(1, 4, vec![1.0, 0.0, 0.0, 0.0]), None);
        assert_eq!(g.value(enc.h).shape(), &[1, 6]);
    }

    #[test]
    fn uniform_logits_cost_log_k() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::matrix(2, 5, vec![0.0; 10]));
        let loss = label_smoothed_ce(&mut g, l, &[2, 3], 0.0);
        assert!((g.scalar(loss) - 5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn confident_correct_logits_cost_nothing() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::matrix(1, 3, vec![-1e3, 1e3, -1e3]));
        let loss = label_smoothed_ce(&mut g, l, &[1], 0.0);
        assert!(g.scalar(loss).abs() < 1e-12);
    }

    #[test]
    fn all_pad_targets_cost_nothing() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::matrix(2, 3, vec![0.3; 6]));
        let loss = label_smoothed_ce(&mut g, l, &[PAD, PAD], 0.2);
        assert_eq!(g.scalar(loss), 0.0);
    }

    #[test]
    fn smoothed_ce_matches_hand_sum() {
        // K = 4, eps = 0.2, target 2.
        let logits = [0.5, -1.0, 2.0, 0.25];
        let lse = logits.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        let q = [0.2 / 3.0, 0.2 / 3.0, 0.8, 0.2 / 3.0];
        let expected: f64 = -(0..4).map(|k| q[k] * (logits[k] - lse)).sum::<f64>();
        let mut g = Graph::new();
        let l = g.constant(Tensor::matrix(1, 4, logits.to_vec()));
        let loss = label_smoothed_ce(&mut g, l, &[2], 0.2);
        assert!((g.scalar(loss) - expected).abs() < 1e-14);
    }
}
