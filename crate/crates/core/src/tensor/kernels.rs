// Slice-level numeric kernels shared by the graph ops and their adjoints.

use super::Window;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `a (m x k) * b (k x n)`, accumulated in `k` order for every output.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (o, &bpj) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bpj;
            }
        }
    }
    out
}

/// `out (k x n) += a^T * g` for `a: m x k`, `g: m x n`.
pub fn matmul_at_b_acc(out: &mut [f64], a: &[f64], g: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            for (o, &gij) in out[p * n..(p + 1) * n].iter_mut().zip(grow) {
                *o += aip * gij;
            }
        }
    }
}

/// `out (m x k) += g (m x n) * b^T` for `b: k x n`.
pub fn matmul_a_bt_acc(out: &mut [f64], g: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (&x, &y) in grow.iter().zip(brow) {
                s += x * y;
            }
            out[i * k + p] += s;
        }
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

pub fn log_softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    for x in row.iter_mut() {
        *x -= lse;
    }
}

pub fn cumprod_exclusive(x: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut acc = 1.0;
    for &v in x {
        out.push(acc);
        acc *= v;
    }
    out
}

/// Returns `(p * q, q)` for the carried mass `q`.
pub fn monotonic_scan(p: &[f64], a: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut q = Vec::with_capacity(p.len());
    let mut carry = 0.0;
    for j in 0..p.len() {
        carry = if j == 0 { a[0] } else { (1.0 - p[j - 1]) * carry + a[j] };
        q.push(carry);
    }
    let y = p.iter().zip(&q).map(|(x, y)| x * y).collect();
    (y, q)
}

/// Chunkwise spreading of `alpha` over windows ending at each frame; returns
/// the output and each window's log-sum-exp.
pub fn chunk_softmax(alpha: &[f64], u: &[f64], w: usize) -> (Vec<f64>, Vec<f64>) {
    let t = alpha.len();
    let mut lse = Vec::with_capacity(t);
    for k in 0..t {
        let win = &u[(k + 1).saturating_sub(w)..=k];
        let m = win.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        lse.push(m + win.iter().map(|x| (x - m).exp()).sum::<f64>().ln());
    }
    let mut out = vec![0.0; t];
    for k in 0..t {
        if alpha[k] == 0.0 {
            continue;
        }
        for j in (k + 1).saturating_sub(w)..=k {
            out[j] += alpha[k] * (u[j] - lse[k]).exp();
        }
    }
    (out, lse)
}

pub fn moving_sum(x: &[f64], w: usize, window: Window) -> Vec<f64> {
    let t = x.len();
    (0..t)
        .map(|j| {
            let (lo, hi) = match window {
                Window::Ahead => (j, (j + w).min(t)),
                Window::Behind => ((j + 1).saturating_sub(w), j + 1),
            };
            x[lo..hi].iter().sum()
        })
        .collect()
}

pub fn conv1d(x: &[f64], w: &[f64], steps: usize, k: usize, d_in: usize, d_out: usize) -> Vec<f64> {
    let half = k / 2;
    let mut out = vec![0.0; steps * d_out];
    for t in 0..steps {
        let orow = &mut out[t * d_out..(t + 1) * d_out];
        for tau in 0..k {
            let src = t + tau;
            if src < half || src - half >= steps {
                continue;
            }
            let xrow = &x[(src - half) * d_in..(src - half + 1) * d_in];
            let wk = &w[tau * d_out * d_in..(tau + 1) * d_out * d_in];
            for (o, wrow) in orow.iter_mut().zip(wk.chunks(d_in)) {
                let mut s = 0.0;
                for (&a, &b) in wrow.iter().zip(xrow) {
                    s += a * b;
                }
                *o += s;
            }
        }
    }
    out
}

/// Normalizes one row; writes `xhat` and the output, returns `1/std`.
pub fn layer_norm_row(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    eps: f64,
    xhat: &mut [f64],
    out: &mut [f64],
) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + eps).sqrt();
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * rstd;
        out[i] = gain[i] * xhat[i] + bias[i];
    }
    rstd
}
