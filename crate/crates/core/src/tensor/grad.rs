use super::{kernels, Graph, Node, Op, TensorError, Var, Window};

/// Returns the gradient buffer for `v`, allocating it on first use, or `None`
/// when `v` does not need a gradient.
fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut [f64]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
}

fn add_into(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, g: &[f64]) {
    if let Some(dst) = slot(grads, nodes, v) {
        for (d, &x) in dst.iter_mut().zip(g) {
            *d += x;
        }
    }
}

impl Graph {
    /// Reverse sweep from a scalar root. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        let rv = &self.nodes[root.0].value;
        if rv.len() != 1 {
            return Err(TensorError::NonScalarRoot(rv.shape().to_vec()));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[root.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        let nodes = &self.nodes;

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let y = node.value.data();
            match &node.op {
                Op::Leaf => leaf_grads.push((i, g)),
                Op::Add(a, b) => {
                    add_into(&mut grads, nodes, *a, &g);
                    add_into(&mut grads, nodes, *b, &g);
                }
                Op::Sub(a, b) => {
                    add_into(&mut grads, nodes, *a, &g);
                    if let Some(d) = slot(&mut grads, nodes, *b) {
                        d.iter_mut().zip(&g).for_each(|(d, x)| *d -= x);
                    }
                }
                Op::Mul(a, b) => {
                    let (xa, xb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(d) = slot(&mut grads, nodes, *a) {
                        for k in 0..d.len() {
                            d[k] += g[k] * xb[k];
                        }
                    }
                    if let Some(d) = slot(&mut grads, nodes, *b) {
                        for k in 0..d.len() {
                            d[k] += g[k] * xa[k];
                        }
                    }
                }
                Op::Div(a, b) => {
                    let (xa, xb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(d) = slot(&mut grads, nodes, *a) {
                        for k in 0..d.len() {
                            d[k] += g[k] / xb[k];
                        }
                    }
                    if let Some(d) = slot(&mut grads, nodes, *b) {
                        // (a / b) / b instead of a / b^2, which underflows for tiny b.
                        for k in 0..d.len() {
                            if g[k] != 0.0 && xa[k] != 0.0 {
                                d[k] -= g[k] * (y[k] / xb[k]);
                            }
                        }
                    }
                }
                Op::Affine(a, s) => {
                    if let Some(d) = slot(&mut grads, nodes, *a) {
                        d.iter_mut().zip(&g).for_each(|(d, x)| *d += s * x);
                    }
                }
                Op::ScaleBy(a, s) => {
                    let k = nodes[s.0].value.item();
                    let xa = nodes[a.0].value.data();
                    if let Some(d) = slot(&mut grads, nodes, *a) {
                        d.iter_mut().zip(&g).for_each(|(d, x)| *d += k * x);
                    }
                    if let Some(d) = slot(&mut grads, nodes, *s) {
                        d[0] += g.iter().zip(xa).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
                Op::ShiftBy(a, s) => {
                    add_into(&mut grads, nodes, *a, &g);
                    if let Some(d) = slot(&mut grads, nodes, *s) {
                        d[0] += g.iter().sum::<f64>();
                    }
                }
                Op::AddRow(m, v) => {
                    add_into(&mut grads, nodes, *m, &g);
                    if let Some(d) = slot(&mut grads, nodes, *v) {
                        let c = d.len();
                        for row in g.chunks(c.max(1)) {
                            d.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                        }
                    }
                }
                Op::MatMul { a, b, m, k, n } => {
                    let (xa, xb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(d) = slot(&mut grads, nodes, *a) {
                        kernels::matmul_a_bt_acc(d, &g, xb, *m, *k, *n);
                    }
                    if let Some(d) = slot(&mut grads, nodes, *b) {
                        kernels::matmul_at_b_acc(d, xa, &g, *m, *k, *n);
                    }
                }
                Op::Sigmoid(a) => {
                    if let Some(d) = slot(&mut grads, nodes, *a) {
                        for k in 0..d.len() {
                            d[k] += g[k] * y[k] * (1.0 - y[k]);
                        }
                    }
                }
                Op::Tanh(a) => {
                    if let Some(d) = slot(&mut grads, nodes, *a) {
                        for k in 0..d.len() {
                            d[k] += g[k] * (1.0 - y[k] * y[k]);
                        }
                    }
                }
                Op::Relu(a) => {
                    let x = nodes[a.0].value.data();
                    if let Some(d) = slot(&mut grads, nodes, *a) {
                        for k in 0..d.len() {
                            if x[k] > 0.0 {
                                d[k] += g[k];
                            }
                        }
                    }
                }
                Op::Exp(a) => {
                    if let Some(d) = slot(&mut grads, nodes, *a) {
                        for k in 0..d.len() {
                            d[k] += g[k] * y[k];
                        }
                    }
                }
                Op::Log(a) => {
                    let x = nodes[a.0].value.data();
                    if let Some(d) = slot(&mut grads, nodes, *a) {
                        for k in 0..d.len() {
                            d[k] += g[k] / x[k];
                        }
                    }
                }
                Op::Abs(a) => {
                    let x = nodes[a.0].value.data();
                    if let Some(d) = slot(&mut grads, nodes, *a) {
                        for k in 0..d.len() {
                            if x[k] > 0.0 {
                                d[k] += g[k];
                            } else if x[k] < 0.0 {
                                d[k] -= g[k];
                            }
                        }
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    let x = nodes[a.0].value.data();
                    if let Some(d) = slot(&mut grads, nodes, *a) {
                        for k in 0..d.len() {
                            if x[k] >= *lo && x[k] <= *hi {
                                d[k] += g[k];
                            }
                        }
                    }
                }
                Op::MulConst(a, mask) => {
                    if let Some(d) = slot(&mut grads, nodes, *a) {
                        for k in 0..d.len() {
                            d[k] += g[k] * mask[k];
                        }
                    }
                }
                Op::AddConst(a) | Op::Reshape(a) => add_into(&mut grads, nodes, *a, &g),
                Op::Sum(a) => {
                    if let Some(d) = slot(&mut grads, nodes, *a) {
                        d.iter_mut().for_each(|d| *d += g[0]);
                    }
                }
                Op::L2Norm(a) => {
                    let x = nodes[a.0].value.data();
                    let norm = y[0];
                    if norm > 0.0 {
                        if let Some(d) = slot(&mut grads, nodes, *a) {
                            for k in 0..d.len() {
                                d[k] += g[0] * x[k] / norm;
                            }
                        }
                    }
                }
                Op::Softmax(a, c) => {
                    if let Some(d) = slot(&mut grads, nodes, *a) {
                        let c = (*c).max(1);
                        for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                            let dotp: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                            for k in 0..drow.len() {
                                drow[k] += yrow[k] * (grow[k] - dotp);
                            }
                        }
                    }
                }
                Op::LogSoftmax(a, c) => {
                    if let Some(d) = slot(&mut grads, nodes, *a) {
                        let c = (*c).max(1);
                        for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                            let gs: f64 = grow.iter().sum();
                            for k in 0..drow.len() {
                                drow[k] += grow[k] - yrow[k].exp() * gs;
                            }
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = nodes[p.0].value.len();
                        add_into(&mut grads, nodes, *p, &g[off..off + len]);
                        off += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.cols();
                    let mut off = 0;
                    for p in parts {
                        let w = nodes[p.0].value.cols();
                        if let Some(d) = slot(&mut grads, nodes, *p) {
                            for (r, drow) in d.chunks_mut(w.max(1)).enumerate() {
                                let src = &g[r * total + off..r * total + off + w];
                                drow.iter_mut().zip(src).for_each(|(d, x)| *d += x);
                            }
                        }
                        off += w;
                    }
                }
                Op::Slice(a, off) => {
                    if let Some(d) = slot(&mut grads, nodes, *a) {
                        for (k, x) in g.iter().enumerate() {
                            d[off + k] += x;
                        }
                    }
                }
                Op::CumSum(a) => {
                    if let Some(d) = slot(&mut grads, nodes, *a) {
                        let mut acc = 0.0;
                        for k in (0..d.len()).rev() {
                            acc += g[k];
                            d[k] += acc;
                        }
                    }
                }
                Op::CumProdExcl(a) => {
                    // d out[j] / d x[m] = prod_{l<m} x_l * prod_{m<l<j} x_l for j > m.
                    // Re-scan from the right instead of dividing by out[j].
                    let x = nodes[a.0].value.data();
                    if let Some(d) = slot(&mut grads, nodes, *a) {
                        let t = d.len();
                        let mut tail = 0.0;
                        for m in (0..t).rev() {
                            if m + 1 < t {
                                tail = g[m + 1] + x[m + 1] * tail;
                            }
                            d[m] += y[m] * tail;
                        }
                    }
                }
                Op::MonotonicScan { p, prev, q } => {
                    // Right-to-left adjoint of the carried mass: dq_j = g_j p_j + (1 - p_j) dq_{j+1}.
                    let pv = nodes[p.0].value.data();
                    let t = pv.len();
                    let mut dq = vec![0.0; t];
                    let mut next = 0.0;
                    for j in (0..t).rev() {
                        next = g[j] * pv[j] + if j + 1 < t { (1.0 - pv[j]) * next } else { 0.0 };
                        dq[j] = next;
                    }
                    if let Some(d) = slot(&mut grads, nodes, *prev) {
                        d.iter_mut().zip(&dq).for_each(|(d, x)| *d += x);
                    }
                    if let Some(d) = slot(&mut grads, nodes, *p) {
                        for j in 0..t {
                            let later = if j + 1 < t { dq[j + 1] } else { 0.0 };
                            d[j] += q[j] * (g[j] - later);
                        }
                    }
                }
                Op::ChunkSoftmax { alpha, u, w, lse } => {
                    let (av, uv) = (nodes[alpha.0].value.data(), nodes[u.0].value.data());
                    let t = av.len();
                    let weight = |k: usize, j: usize| (uv[j] - lse[k]).exp();
                    let mut da = vec![0.0; t];
                    let mut du = vec![0.0; t];
                    for k in 0..t {
                        let lo = (k + 1).saturating_sub(*w);
                        let gs: f64 = (lo..=k).map(|j| g[j] * weight(k, j)).sum();
                        da[k] = gs;
                        for j in lo..=k {
                            du[j] += av[k] * weight(k, j) * (g[j] - gs);
                        }
                    }
                    add_into(&mut grads, nodes, *alpha, &da);
                    add_into(&mut grads, nodes, *u, &du);
                }
                Op::MovingSum(a, w, window) => {
                    if let Some(d) = slot(&mut grads, nodes, *a) {
                        let back = match window {
                            Window::Ahead => Window::Behind,
                            Window::Behind => Window::Ahead,
                        };
                        let gx = kernels::moving_sum(&g, *w, back);
                        d.iter_mut().zip(&gx).for_each(|(d, x)| *d += x);
                    }
                }
                Op::Conv1d { x, w, k, d_in, d_out } => {
                    let (xv, wv) = (nodes[x.0].value.data(), nodes[w.0].value.data());
                    let steps = nodes[x.0].value.rows();
                    let half = k / 2;
                    if let Some(d) = slot(&mut grads, nodes, *x) {
                        for t in 0..steps {
                            let grow = &g[t * d_out..(t + 1) * d_out];
                            for tau in 0..*k {
                                let src = t + tau;
                                if src < half || src - half >= steps {
                                    continue;
                                }
                                let s = src - half;
                                let wk = &wv[tau * d_out * d_in..(tau + 1) * d_out * d_in];
                                let dx = &mut d[s * d_in..(s + 1) * d_in];
                                for (o, &go) in grow.iter().enumerate() {
                                    if go == 0.0 {
                                        continue;
                                    }
                                    for (dxi, &wi) in dx.iter_mut().zip(&wk[o * d_in..(o + 1) * d_in]) {
                                        *dxi += go * wi;
                                    }
                                }
                            }
                        }
                    }
                    if let Some(d) = slot(&mut grads, nodes, *w) {
                        for t in 0..steps {
                            let grow = &g[t * d_out..(t + 1) * d_out];
                            for tau in 0..*k {
                                let src = t + tau;
                                if src < half || src - half >= steps {
                                    continue;
                                }
                                let xrow = &xv[(src - half) * d_in..(src - half + 1) * d_in];
                                let dw = &mut d[tau * d_out * d_in..(tau + 1) * d_out * d_in];
                                for (o, &go) in grow.iter().enumerate() {
                                    if go == 0.0 {
                                        continue;
                                    }
                                    for (dwi, &xi) in dw[o * d_in..(o + 1) * d_in].iter_mut().zip(xrow) {
                                        *dwi += go * xi;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let gv = nodes[gain.0].value.data();
                    let c = gv.len().max(1);
                    if let Some(d) = slot(&mut grads, nodes, *bias) {
                        for row in g.chunks(c) {
                            d.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                        }
                    }
                    if let Some(d) = slot(&mut grads, nodes, *gain) {
                        for (row, xh) in g.chunks(c).zip(xhat.chunks(c)) {
                            for k in 0..c {
                                d[k] += row[k] * xh[k];
                            }
                        }
                    }
                    if let Some(d) = slot(&mut grads, nodes, *x) {
                        let cf = c as f64;
                        for (r, (grow, xh)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                            let gh: Vec<f64> = grow.iter().zip(gv).map(|(a, b)| a * b).collect();
                            let mean_gh = gh.iter().sum::<f64>() / cf;
                            let mean_ghx = gh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / cf;
                            let dx = &mut d[r * c..(r + 1) * c];
                            for k in 0..c {
                                dx[k] += rstd[r] * (gh[k] - mean_gh - xh[k] * mean_ghx);
                            }
                        }
                    }
                }
            }
        }

        for (i, g) in leaf_grads {
            match &mut self.nodes[i].grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, x)| *a += x),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}
