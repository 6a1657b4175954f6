//! Monotonic chunkwise attention: energies with convolution-enhanced keys,
//! selection probabilities, the marginalized alignment recursion in its
//! parallel cumulative form, chunkwise softening and the hard decision rule.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::model::Bound;
use crate::tensor::{Graph, Tensor, Var, Window};

/// Guard added to `||v||` in the normalized energy.
pub const NORM_EPS: f64 = 1e-12;
/// Firing threshold on selection probabilities at inference.
pub const THRESHOLD: f64 = 0.5;
// Lower bound on the clipped running product and on chunk denominators so
// long saturated runs cannot divide by an underflowed zero.
const TINY: f64 = 1e-300;

/// Parameters of one energy function `g v^T/||v|| ReLU(W_h k_j + W_s s + b) + r`
/// with keys `k = W_c * h`.
#[derive(Clone, Copy, Debug)]
pub struct EnergyVars {
    pub g: Var,
    pub v: Var,
    pub w_h: Var,
    pub w_s: Var,
    pub b: Var,
    pub r: Var,
    pub w_c: Var,
}

impl EnergyVars {
    pub fn from_bound(b: &Bound, prefix: &str) -> Self {
        let get = |n: &str| b.get(&format!("{prefix}.{n}"));
        EnergyVars { g: get("g"), v: get("v"), w_h: get("w_h"), w_s: get("w_s"), b: get("b"), r: get("r"), w_c: get("w_c") }
    }
}

/// Projected convolutional keys `W_h (W_c * h)_j`, one row per frame.
pub fn energy_keys(g: &mut Graph, h: Var, ev: &EnergyVars) -> Var {
    let conv = g.conv1d(h, ev.w_c);
    g.matmul(conv, ev.w_h)
}

/// `g v / (||v|| + eps)`.
pub fn normalized_gain(g: &mut Graph, ev: &EnergyVars) -> Var {
    let norm = g.l2_norm(ev.v);
    let denom = g.affine(norm, 1.0, NORM_EPS);
    let s = g.div(ev.g, denom);
    g.scale_by(ev.v, s)
}

/// Energies over all frames for decoder state `s` given precomputed keys.
pub fn energy_from_keys(g: &mut Graph, keys: Var, s: Var, ev: &EnergyVars, gain: Var) -> Var {
    let q0 = g.matmul(s, ev.w_s);
    let q = g.add(q0, ev.b);
    let pre = g.add_row(keys, q);
    let act = g.relu(pre);
    let e = g.matmul(act, gain);
    g.shift_by(e, ev.r)
}

/// Energies for encoder features `h` (`T' x D`) and decoder state `s`.
pub fn monotonic_energy(g: &mut Graph, h: Var, s: Var, ev: &EnergyVars) -> Var {
    let keys = energy_keys(g, h, ev);
    let gain = normalized_gain(g, ev);
    energy_from_keys(g, keys, s, ev, gain)
}

/// `sigmoid(e + n)`, with `n ~ N(0, noise_std^2)` drawn only when `rng` is
/// given and `noise_std > 0`.
pub fn selection_probs(g: &mut Graph, e: Var, noise_std: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    match rng {
        Some(rng) if noise_std > 0.0 => {
            let normal = Normal::new(0.0, noise_std).expect("finite noise std");
            let noise: Vec<f64> = (0..g.value(e).len()).map(|_| normal.sample(rng)).collect();
            let noisy = g.add_const(e, &noise);
            g.sigmoid(noisy)
        }
        _ => g.sigmoid(e),
    }
}

/// Prior alignment before the first token: one-hot at the first frame.
pub fn initial_alignment(g: &mut Graph, frames: usize) -> Var {
    let mut a = vec![0.0; frames];
    if let Some(x) = a.first_mut() {
        *x = 1.0;
    }
    g.constant(Tensor::vector(a))
}

/// How one alignment row is evaluated. Both give the same values; the
/// sequential scan avoids dividing by running products that underflow once
/// selection probabilities saturate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Recursion {
    /// `p * cumprod_excl(1 - p) * cumsum(alpha_prev / cumprod_excl(1 - clip(p)))`.
    Parallel,
    /// `q_j = (1 - p_{j-1}) q_{j-1} + alpha_prev_j`, `alpha_j = p_j q_j`.
    #[default]
    Sequential,
}

/// One row of the marginalized alignment.
pub fn expected_alignment_step(g: &mut Graph, p: Var, alpha_prev: Var, form: Recursion, clip_eps: f64) -> Var {
    match form {
        Recursion::Parallel => parallel_step(g, p, alpha_prev, clip_eps),
        Recursion::Sequential => g.monotonic_scan(p, alpha_prev),
    }
}

fn parallel_step(g: &mut Graph, p: Var, alpha_prev: Var, clip_eps: f64) -> Var {
    let keep = g.one_minus(p);
    let num = g.cumprod_exclusive(keep);
    let clipped = g.clamp(p, clip_eps, 1.0 - clip_eps);
    let keep_c = g.one_minus(clipped);
    let den0 = g.cumprod_exclusive(keep_c);
    let den = g.clamp(den0, TINY, f64::INFINITY);
    let ratio = g.div(alpha_prev, den);
    let carried = g.cumsum(ratio);
    let pn = g.mul(p, num);
    g.mul(pn, carried)
}

/// All `L` rows of the alignment for a fixed probability matrix.
pub fn expected_alignment(g: &mut Graph, p_rows: &[Var], form: Recursion, clip_eps: f64) -> Vec<Var> {
    let t = p_rows.first().map(|&p| g.value(p).len()).unwrap_or(0);
    let mut prev = initial_alignment(g, t);
    p_rows
        .iter()
        .map(|&p| {
            prev = expected_alignment_step(g, p, prev, form, clip_eps);
            prev
        })
        .collect()
}

/// Zeroes every entry past 1-based frame `boundary + delta`.
pub fn apply_delay_mask(g: &mut Graph, alpha: Var, boundary: usize, delta: usize) -> Var {
    let t = g.value(alpha).len();
    let limit = boundary.saturating_add(delta);
    if limit >= t {
        return alpha;
    }
    let mask: Vec<f64> = (0..t).map(|j| if j < limit { 1.0 } else { 0.0 }).collect();
    g.mul_const(alpha, &mask)
}

/// Alignment rows with the delay constraint applied inside the recursion, so
/// later rows consume the masked mass.
pub fn decot_alignment(
    g: &mut Graph,
    p_rows: &[Var],
    boundaries: &[usize],
    delta: usize,
    form: Recursion,
    clip_eps: f64,
) -> Vec<Var> {
    assert_eq!(p_rows.len(), boundaries.len(), "one gold boundary per token");
    let t = p_rows.first().map(|&p| g.value(p).len()).unwrap_or(0);
    let mut prev = initial_alignment(g, t);
    p_rows
        .iter()
        .zip(boundaries)
        .map(|(&p, &b)| {
            let a = expected_alignment_step(g, p, prev, form, clip_eps);
            prev = apply_delay_mask(g, a, b, delta);
            prev
        })
        .collect()
}

/// `beta_j = exp(u_j) * sum_{k=j}^{j+w-1} alpha_k / sum_{l=k-w+1}^{k} exp(u_l)`,
/// windows truncated at the edges and normalized in log space.
pub fn chunkwise_attention(g: &mut Graph, alpha: Var, u: Var, w: usize) -> Var {
    g.chunk_softmax(alpha, u, w)
}

/// The same quantity built from two moving sums over globally shifted
/// exponentials. Exact for moderate energies, but a window whose energies
/// sit far below the global maximum underflows.
pub fn chunkwise_attention_moving_sum(g: &mut Graph, alpha: Var, u: Var, w: usize) -> Var {
    assert!(w >= 1, "chunk width must be >= 1");
    let m = g.data(u).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shift = vec![if m.is_finite() { -m } else { 0.0 }; g.value(u).len()];
    let shifted = g.add_const(u, &shift);
    let ex = g.exp(shifted);
    let den0 = g.moving_sum(ex, w, Window::Behind);
    let den = g.clamp(den0, TINY, f64::INFINITY);
    let ratio = g.div(alpha, den);
    let spread = g.moving_sum(ratio, w, Window::Ahead);
    g.mul(ex, spread)
}

/// `c = sum_j beta_j h_j`.
pub fn context_vector(g: &mut Graph, beta: Var, h: Var) -> Var {
    g.matmul(beta, h)
}

/// Smallest 1-based frame `j >= j_start` with `p[j] >= 0.5`.
pub fn hard_alignment_step(p_row: &[f64], j_start: usize) -> Option<usize> {
    let start = j_start.max(1);
    (start..=p_row.len()).find(|&j| p_row[j - 1] >= THRESHOLD)
}

/// Soft weights over the `w` frames ending at 1-based `boundary`.
pub fn hard_chunk_weights(u: &[f64], boundary: usize, w: usize) -> Vec<f64> {
    let lo = boundary.saturating_sub(w);
    let window = &u[lo..boundary];
    let m = window.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = window.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = ex.iter().sum();
    ex.into_iter().map(|x| x / s).collect()
}
