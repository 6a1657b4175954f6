use super::{Graph, Tensor, Var};

/// Settings for a central-difference gradient check.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the denominator of the relative error, so gradients
    /// that are zero up to rounding compare absolutely.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { step: 1e-5, tolerance: 1e-4, floor: 1e-6 }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, flat element index) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
    /// False when any evaluation of `f` was non-finite.
    pub finite: bool,
    pub passed: bool,
}

fn eval<F>(f: &F, params: &[Tensor]) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let root = f(&mut g, &vars);
    g.scalar(root)
}

/// Compares reverse-mode gradients of the scalar function `f` against central
/// differences over every entry of `params`.
pub fn finite_difference_check<F>(f: F, params: &[Tensor], cfg: &GradCheck) -> GradCheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    assert!(cfg.step > 0.0, "finite difference step must be positive");
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p.clone())).collect();
    let root = f(&mut g, &vars);
    let mut finite = g.scalar(root).is_finite();
    let analytic: Vec<Vec<f64>> = if g.backward(root).is_ok() {
        vars.iter()
            .zip(params)
            .map(|(&v, p)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.len()]))
            .collect()
    } else {
        finite = false;
        params.iter().map(|p| vec![0.0; p.len()]).collect()
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    let mut max_rel_error = 0.0f64;
    let mut worst = None;
    for pi in 0..params.len() {
        let mut col = Vec::with_capacity(params[pi].len());
        for e in 0..params[pi].len() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + cfg.step;
            let up = eval(&f, &work);
            work[pi].data_mut()[e] = orig - cfg.step;
            let down = eval(&f, &work);
            work[pi].data_mut()[e] = orig;
            if !up.is_finite() || !down.is_finite() {
                finite = false;
            }
            let num = (up - down) / (2.0 * cfg.step);
            let ana = analytic[pi][e];
            let denom = ana.abs().max(num.abs()).max(cfg.floor);
            let rel = (ana - num).abs() / denom;
            if !(rel <= max_rel_error) {
                max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                worst = Some((pi, e));
            }
            col.push(num);
        }
        numeric.push(col);
    }
    let passed = finite && max_rel_error <= cfg.tolerance;
    GradCheckReport { max_rel_error, worst, analytic, numeric, finite, passed }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let p = vec![Tensor::vector(vec![0.3, -1.2, 2.5]), Tensor::matrix(2, 2, vec![1.0, -0.5, 0.25, 4.0])];
        let r = finite_difference_check(
            |g, v| {
                let a = g.mul(v[0], v[0]);
                let b = g.mul(v[1], v[1]);
                let sa = g.sum(a);
                let sb = g.sum(b);
                g.add(sa, sb)
            },
            &p,
            &GradCheck::default(),
        );
        assert!(r.passed);
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let p = vec![Tensor::vector(vec![1.0, 2.0])];
        let r = finite_difference_check(
            |g, v| {
                let z = g.scale(v[0], 0.0);
                let s = g.sum(z);
                g.affine(s, 1.0, 7.0)
            },
            &p,
            &GradCheck::default(),
        );
        assert!(r.passed);
        assert!(r.analytic[0].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn non_finite_value_is_reported_not_raised() {
        let p = vec![Tensor::vector(vec![0.0])];
        let r = finite_difference_check(
            |g, v| {
                let l = g.log(v[0]);
                g.sum(l)
            },
            &p,
            &GradCheck::default(),
        );
        assert!(!r.finite);
        assert!(!r.passed);
    }
}
