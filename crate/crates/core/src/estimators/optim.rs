//! Derivative-free simplex minimizer with a Newton polish.
//!
//! Variance-component criteria are smooth and low-dimensional (2-4
//! parameters after transformation), so a Nelder-Mead simplex started near a
//! moment estimate converges quickly; a finite-difference Newton polish then
//! drives the gradient norm below tolerance so convergence can be certified.
//! One restart from the incumbent is attempted before giving up.

#[derive(Debug, Clone)]
pub struct OptimOptions {
    pub max_iter: usize,
    pub f_tol: f64,
    pub x_tol: f64,
    pub grad_tol: f64,
    pub initial_step: f64,
}

impl Default for OptimOptions {
    fn default() -> Self {
        Self {
            max_iter: 400,
            f_tol: 1e-12,
            x_tol: 1e-8,
            grad_tol: 5e-7,
            initial_step: 0.25,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub f: f64,
    /// Best criterion value after each accepted step (nonincreasing).
    pub best_path: Vec<f64>,
    pub grad_norm: f64,
    pub converged: bool,
    pub evals: usize,
}

pub fn minimize<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    opts: &OptimOptions,
) -> OptimResult {
    let mut evals = 0usize;
    let mut best_path = Vec::new();
    // repeated points (finite-difference stencils revisit them) are served
    // from a memo keyed on the exact bit pattern
    let mut memo: std::collections::HashMap<Vec<u64>, f64> = std::collections::HashMap::new();
    let mut eval = |x: &[f64], evals: &mut usize| -> f64 {
        let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        if let Some(&v) = memo.get(&key) {
            return v;
        }
        *evals += 1;
        let v = f(x);
        let v = if v.is_nan() { f64::INFINITY } else { v };
        memo.insert(key, v);
        v
    };

    let mut start = x0.to_vec();
    let mut step = opts.initial_step;
    let mut best: Option<(Vec<f64>, f64)> = None;
    for _restart in 0..2 {
        let (x, fx, simplex_ok) =
            nelder_mead(&mut eval, &mut evals, &mut best_path, &start, step, opts);
        match &best {
            Some((_, fb)) if *fb <= fx => {}
            _ => best = Some((x.clone(), fx)),
        }
        if simplex_ok {
            break;
        }
        // restart once from the incumbent with a smaller simplex
        start = x;
        step *= 0.1;
    }
    let (mut x, mut fx) = best.unwrap();

    // Newton polish on finite differences until the gradient is certifiably
    // small.
    let k = x.len();
    let mut grad_norm = f64::INFINITY;
    for _ in 0..12 {
        let g = fd_gradient(&mut eval, &mut evals, &x, fx);
        grad_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if grad_norm < opts.grad_tol {
            break;
        }
        let h = fd_hessian(&mut eval, &mut evals, &x, &g, fx);
        let mut step_dir = solve_damped(&h, &g);
        // backtracking line search on the Newton direction
        let mut improved = false;
        for _ in 0..30 {
            let cand: Vec<f64> = x.iter().zip(&step_dir).map(|(a, d)| a - d).collect();
            let fc = eval(&cand, &mut evals);
            if fc < fx {
                x = cand;
                fx = fc;
                best_path.push(fx);
                improved = true;
                break;
            }
            for d in step_dir.iter_mut() {
                *d *= 0.5;
            }
        }
        if !improved {
            break;
        }
    }
    if grad_norm.is_infinite() && k > 0 {
        let g = fd_gradient(&mut eval, &mut evals, &x, fx);
        grad_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    }

    OptimResult {
        converged: grad_norm < opts.grad_tol,
        x,
        f: fx,
        best_path,
        grad_norm,
        evals,
    }
}

fn nelder_mead<E: FnMut(&[f64], &mut usize) -> f64>(
    eval: &mut E,
    evals: &mut usize,
    best_path: &mut Vec<f64>,
    x0: &[f64],
    step: f64,
    opts: &OptimOptions,
) -> (Vec<f64>, f64, bool) {
    let k = x0.len();
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(k + 1);
    let f0 = eval(x0, evals);
    simplex.push((x0.to_vec(), f0));
    for i in 0..k {
        let mut v = x0.to_vec();
        v[i] += step * (1.0 + v[i].abs() * 0.1);
        let fv = eval(&v, evals);
        simplex.push((v, fv));
    }
    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    best_path.push(simplex[0].1);

    for _ in 0..opts.max_iter {
        let f_best = simplex[0].1;
        let f_worst = simplex[k].1;
        let x_spread = (0..k)
            .map(|j| {
                let lo = simplex.iter().map(|(v, _)| v[j]).fold(f64::INFINITY, f64::min);
                let hi = simplex
                    .iter()
                    .map(|(v, _)| v[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                hi - lo
            })
            .fold(0.0f64, f64::max);
        if (f_worst - f_best).abs() <= opts.f_tol * (1.0 + f_best.abs()) && x_spread <= opts.x_tol
        {
            return (simplex[0].0.clone(), simplex[0].1, true);
        }

        // centroid of all but the worst
        let centroid: Vec<f64> = (0..k)
            .map(|j| simplex[..k].iter().map(|(v, _)| v[j]).sum::<f64>() / k as f64)
            .collect();
        let at = |c: &[f64], t: f64| -> Vec<f64> {
            (0..k)
                .map(|j| c[j] + t * (c[j] - simplex[k].0[j]))
                .collect()
        };
        let xr = at(&centroid, 1.0);
        let fr = eval(&xr, evals);
        if fr < simplex[0].1 {
            let xe = at(&centroid, 2.0);
            let fe = eval(&xe, evals);
            simplex[k] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[k - 1].1 {
            simplex[k] = (xr, fr);
        } else {
            let xc = at(&centroid, -0.5);
            let fc = eval(&xc, evals);
            if fc < simplex[k].1 {
                simplex[k] = (xc, fc);
            } else {
                // shrink toward the best vertex
                let best_x = simplex[0].0.clone();
                for v in simplex.iter_mut().skip(1) {
                    for j in 0..k {
                        v.0[j] = best_x[j] + 0.5 * (v.0[j] - best_x[j]);
                    }
                    v.1 = eval(&v.0, evals);
                }
            }
        }
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        if simplex[0].1 < *best_path.last().unwrap() {
            best_path.push(simplex[0].1);
        }
    }
    (simplex[0].0.clone(), simplex[0].1, false)
}

fn fd_gradient<E: FnMut(&[f64], &mut usize) -> f64>(
    eval: &mut E,
    evals: &mut usize,
    x: &[f64],
    _fx: f64,
) -> Vec<f64> {
    let k = x.len();
    let mut g = vec![0.0; k];
    for j in 0..k {
        let h = 1e-5 * (1.0 + x[j].abs());
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        g[j] = (eval(&xp, evals) - eval(&xm, evals)) / (2.0 * h);
    }
    g
}

fn fd_hessian<E: FnMut(&[f64], &mut usize) -> f64>(
    eval: &mut E,
    evals: &mut usize,
    x: &[f64],
    g0: &[f64],
    _fx: f64,
) -> Vec<Vec<f64>> {
    // forward difference of the gradient, symmetrized
    let k = x.len();
    let mut h = vec![vec![0.0; k]; k];
    for j in 0..k {
        let hj = 1e-4 * (1.0 + x[j].abs());
        let mut xp = x.to_vec();
        xp[j] += hj;
        let gp = fd_gradient(eval, evals, &xp, 0.0);
        for i in 0..k {
            h[i][j] = (gp[i] - g0[i]) / hj;
        }
    }
    for i in 0..k {
        for j in 0..i {
            let s = 0.5 * (h[i][j] + h[j][i]);
            h[i][j] = s;
            h[j][i] = s;
        }
    }
    h
}

/// Solve `H d = g` with escalating Levenberg damping; falls back to a scaled
/// gradient step when the system stays indefinite.
fn solve_damped(h: &[Vec<f64>], g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let mut lambda = 0.0;
    for _ in 0..8 {
        let mut m = nalgebra::DMatrix::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                m[(i, j)] = h[i][j];
            }
            m[(i, i)] += lambda;
        }
        if let Some(chol) = m.cholesky() {
            let d = chol.solve(&nalgebra::DVector::from_column_slice(g));
            return d.iter().copied().collect();
        }
        lambda = if lambda == 0.0 { 1e-6 } else { lambda * 100.0 };
    }
    g.iter().map(|v| v * 1e-3).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn quadratic_bowl() {
        let r = minimize(
            |x| (x[0] - 1.5).powi(2) + 3.0 * (x[1] + 0.5).powi(2) + 2.0,
            &[0.0, 0.0],
            &OptimOptions::default(),
        );
        assert!(r.converged);
        assert_abs_diff_eq!(r.x[0], 1.5, epsilon = 1e-6);
        assert_abs_diff_eq!(r.x[1], -0.5, epsilon = 1e-6);
        assert!(r.grad_norm < 1e-6);
    }

    #[test]
    fn rosenbrock_2d() {
        let r = minimize(
            |x| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2),
            &[-1.2, 1.0],
            &OptimOptions {
                max_iter: 2000,
                ..OptimOptions::default()
            },
        );
        assert!(r.converged, "grad norm {}", r.grad_norm);
        assert_abs_diff_eq!(r.x[0], 1.0, epsilon = 1e-4);
        assert_abs_diff_eq!(r.x[1], 1.0, epsilon = 1e-4);
    }

    #[test]
    fn best_path_is_monotone() {
        let r = minimize(
            |x| x[0].powi(4) + (x[1] - 2.0).powi(2) + (x[2] + 1.0).powi(2),
            &[2.0, -1.0, 2.0],
            &OptimOptions::default(),
        );
        for w in r.best_path.windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "path not monotone: {:?}", w);
        }
        assert!(r.converged);
    }
}
