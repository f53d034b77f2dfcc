//! Constrained longitudinal data analysis.
//!
//! The baseline outcome is a response row, and the shared intercept encodes
//! the equal-baseline-mean constraint across arms: fixed effects are
//! `intercept + t + t*active (+ t^2 + t^2*active) + age + apoe4` with no
//! treatment main effect. Subjects carry a random intercept and slope with an
//! unstructured 2x2 covariance plus an independent residual; estimation is
//! maximum likelihood with the residual variance profiled out and the scaled
//! random-effect covariance parameterized by its log-Cholesky factor.

use super::block::{accumulate, PatternTable, SubjectBlock};
use super::optim::{minimize, OptimOptions};
use super::{ArmEndpoint, FitResult, LongitudinalDataset, SubjectInfo};
use crate::datagen::Arm;
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

struct Problem {
    blocks: Vec<SubjectBlock>,
    /// per-pattern visit times
    pattern_times: Vec<Vec<f64>>,
    p: usize,
    n_obs: usize,
    coef_names: Vec<String>,
    init: [f64; 3],
}

enum Design {
    TwoArm,
    SingleArm,
}

fn build_problem(
    data: &LongitudinalDataset,
    keep: &dyn Fn(&SubjectInfo) -> bool,
    degree: usize,
    design: Design,
) -> Result<Problem> {
    if !(degree == 1 || degree == 2) {
        return Err(Error::Data("cLDA degree must be 1 or 2".into()));
    }
    if !data.rows().iter().any(|r| r.time.abs() < 1e-9) {
        return Err(Error::Data("cLDA needs baseline rows".into()));
    }
    let two_arm = matches!(design, Design::TwoArm);
    let mut coef_names: Vec<String> = vec!["intercept".into(), "t".into()];
    if two_arm {
        coef_names.push("t_active".into());
    }
    if degree == 2 {
        coef_names.push("t2".into());
        if two_arm {
            coef_names.push("t2_active".into());
        }
    }

    let kept: Vec<&SubjectInfo> = data.subjects().iter().filter(|s| keep(s)).collect();
    if kept.is_empty() {
        return Err(Error::Data("no subjects to fit".into()));
    }
    let nk = kept.len() as f64;
    let age_mean = kept.iter().map(|s| s.age).sum::<f64>() / nk;
    let apoe_mean = kept.iter().map(|s| s.apoe4).sum::<f64>() / nk;
    // drop constant covariates (collinear with the intercept)
    let varies = |vals: Vec<f64>| -> bool {
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        hi - lo > 1e-12
    };
    let age_active = varies(kept.iter().map(|s| s.age).collect());
    let apoe_active = varies(kept.iter().map(|s| s.apoe4).collect());
    if age_active {
        coef_names.push("age".into());
    }
    if apoe_active {
        coef_names.push("apoe4".into());
    }
    let p = coef_names.len();
    let m = p + 1;

    let grouped = data.grouped();
    let mut patterns = PatternTable::default();
    let mut pattern_times: Vec<Vec<f64>> = Vec::new();
    let mut blocks = Vec::with_capacity(kept.len());
    // moment starting values from per-subject least-squares lines
    let mut icepts = Vec::new();
    let mut slopes = Vec::new();
    let mut resid_ss = 0.0;
    let mut resid_n = 0usize;

    let grid_index = |t: f64| -> Option<u16> {
        data.visit_times
            .iter()
            .position(|&v| (v - t).abs() < 1e-9)
            .map(|i| i as u16)
    };

    for s in &kept {
        let obs = match grouped.get(&s.id) {
            Some(o) => o,
            None => continue,
        };
        let key: Vec<u16> = obs.iter().filter_map(|&(t, _)| grid_index(t)).collect();
        if key.is_empty() {
            continue;
        }
        let pattern = patterns.intern(key);
        if pattern as usize == pattern_times.len() {
            pattern_times.push(obs.iter().map(|&(t, _)| t).collect());
        }
        let active = if two_arm && s.arm == Arm::Treatment {
            1.0
        } else {
            0.0
        };
        let mut xy = vec![0.0f64; obs.len() * m];
        for (r, &(t, y)) in obs.iter().enumerate() {
            let mut c = 0;
            xy[r * m + c] = 1.0;
            c += 1;
            xy[r * m + c] = t;
            c += 1;
            if two_arm {
                xy[r * m + c] = t * active;
                c += 1;
            }
            if degree == 2 {
                xy[r * m + c] = t * t;
                c += 1;
                if two_arm {
                    xy[r * m + c] = t * t * active;
                    c += 1;
                }
            }
            if age_active {
                xy[r * m + c] = s.age - age_mean;
                c += 1;
            }
            if apoe_active {
                xy[r * m + c] = s.apoe4 - apoe_mean;
            }
            xy[r * m + p] = y;
        }
        // per-subject line for starting values
        if obs.len() >= 3 {
            let n = obs.len() as f64;
            let tm = obs.iter().map(|o| o.0).sum::<f64>() / n;
            let ym = obs.iter().map(|o| o.1).sum::<f64>() / n;
            let sxx: f64 = obs.iter().map(|o| (o.0 - tm).powi(2)).sum();
            let sxy: f64 = obs.iter().map(|o| (o.0 - tm) * (o.1 - ym)).sum();
            if sxx > 1e-12 {
                let b = sxy / sxx;
                let a = ym - b * tm;
                icepts.push(a);
                slopes.push(b);
                for &(t, y) in obs {
                    let r = y - a - b * t;
                    resid_ss += r * r;
                }
                resid_n += obs.len() - 2;
            }
        }
        blocks.push(SubjectBlock {
            pattern,
            n: obs.len(),
            xy,
        });
    }
    if blocks.is_empty() {
        return Err(Error::Data("no observations to fit".into()));
    }
    let n_obs: usize = blocks.iter().map(|b| b.n).sum();

    let var = |v: &[f64]| -> f64 {
        if v.len() < 2 {
            return 0.1;
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    let sigma2_0 = (resid_ss / resid_n.max(1) as f64).max(1e-6);
    let g11_0 = (var(&icepts) / sigma2_0).max(1e-3);
    let g22_0 = (var(&slopes) / sigma2_0).max(1e-4);
    let init = [0.5 * g11_0.ln(), 0.0, 0.5 * g22_0.ln()];

    Ok(Problem {
        blocks,
        pattern_times,
        p,
        n_obs,
        coef_names,
        init,
    })
}

/// `V0 = I + Z (L L') Z'` with `Z = [1, t]`, inverted via Cholesky.
fn v0_inverse(times: &[f64], l11: f64, l21: f64, l22: f64) -> Option<(DMatrix<f64>, f64)> {
    let g11 = l11 * l11;
    let g12 = l11 * l21;
    let g22 = l21 * l21 + l22 * l22;
    let n = times.len();
    let mut v = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let add = if i == j { 1.0 } else { 0.0 };
            v[(i, j)] = add + g11 + g12 * (times[i] + times[j]) + g22 * times[i] * times[j];
        }
    }
    let chol = v.cholesky()?;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Some((chol.inverse(), logdet))
}

struct Fitted {
    beta: DVector<f64>,
    cov: DMatrix<f64>,
    sigma2: f64,
    g: [f64; 3], // g11, g12, g22 on the response scale
    loglik: f64,
    converged: bool,
    iterations: usize,
    grad_norm: f64,
}

fn fit_problem(problem: &Problem, opts: &OptimOptions) -> Result<Fitted> {
    let p = problem.p;
    let n = problem.n_obs as f64;
    // profiled ML criterion per observation over the log-Cholesky of the
    // sigma^2-scaled random-effect covariance
    let criterion = |theta: &[f64]| -> f64 {
        let (l11, l21, l22) = (theta[0].exp(), theta[1], theta[2].exp());
        if !l11.is_finite() || !l22.is_finite() || l11 > 1e6 || l22 > 1e6 {
            return f64::INFINITY;
        }
        let mut mats = Vec::with_capacity(problem.pattern_times.len());
        for times in &problem.pattern_times {
            match v0_inverse(times, l11, l21, l22) {
                Some(m) => mats.push(m),
                None => return f64::INFINITY,
            }
        }
        let acc = accumulate(&problem.blocks, &mats, p);
        let chol = match acc.a.clone().cholesky() {
            Some(c) => c,
            None => return f64::INFINITY,
        };
        let beta = chol.solve(&acc.b);
        let rss = (acc.q - acc.b.dot(&beta)).max(1e-12);
        // profiled sigma^2 floored so noise-free responses stay bounded
        (rss / n).max(1e-10).ln() + acc.logdet / n
    };

    let opts = OptimOptions {
        initial_step: 0.15,
        ..opts.clone()
    };
    let opt = minimize(criterion, &problem.init, &opts);
    let (l11, l21, l22) = (opt.x[0].exp(), opt.x[1], opt.x[2].exp());
    let mut mats = Vec::with_capacity(problem.pattern_times.len());
    for times in &problem.pattern_times {
        let m = v0_inverse(times, l11, l21, l22)
            .ok_or_else(|| Error::Covariance("marginal covariance not PD at optimum".into()))?;
        mats.push(m);
    }
    let acc = accumulate(&problem.blocks, &mats, p);
    let chol = acc
        .a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SingularDesign("X'V^-1X singular in cLDA".into()))?;
    let beta = chol.solve(&acc.b);
    let rss = (acc.q - acc.b.dot(&beta)).max(1e-12);
    let sigma2 = (rss / n).max(1e-10);
    let cov = chol.inverse() * sigma2;
    let g11 = l11 * l11 * sigma2;
    let g12 = l11 * l21 * sigma2;
    let g22 = (l21 * l21 + l22 * l22) * sigma2;
    Ok(Fitted {
        beta,
        cov,
        sigma2,
        g: [g11, g12, g22],
        loglik: -0.5 * opt.f * n,
        converged: opt.converged,
        iterations: opt.evals,
        grad_norm: opt.grad_norm,
    })
}

/// Fit the two-arm cLDA with linear (`degree = 1`) or quadratic (`degree = 2`)
/// time trends. Subjects missing baseline are retained: baseline is a
/// response here.
pub fn fit_clda(data: &LongitudinalDataset, degree: usize) -> Result<FitResult> {
    fit_clda_with(data, degree, &OptimOptions::default())
}

pub fn fit_clda_with(
    data: &LongitudinalDataset,
    degree: usize,
    opts: &OptimOptions,
) -> Result<FitResult> {
    let problem = build_problem(data, &|_| true, degree, Design::TwoArm)?;
    let fitted = fit_problem(&problem, opts)?;
    Ok(FitResult {
        model: format!("clda{degree}"),
        coef_names: problem.coef_names,
        coef: fitted.beta,
        cov: fitted.cov,
        variance_components: vec![
            ("g_intercept".into(), fitted.g[0]),
            ("g_intercept_slope".into(), fitted.g[1]),
            ("g_slope".into(), fitted.g[2]),
            ("sigma2".into(), fitted.sigma2),
        ],
        loglik: fitted.loglik,
        converged: fitted.converged,
        iterations: fitted.iterations,
        grad_norm: fitted.grad_norm,
    })
}

/// Single-group cLDA endpoint: the estimated change from baseline at the
/// horizon (degree 1) or the area under the mean change curve over
/// `[0, horizon]` (degree 2). Covariates enter the level only, so they cancel
/// from both endpoints.
pub fn fit_clda_arm_endpoint(
    data: &LongitudinalDataset,
    keep: &dyn Fn(&SubjectInfo) -> bool,
    degree: usize,
) -> Result<ArmEndpoint> {
    let problem = build_problem(data, keep, degree, Design::SingleArm)?;
    let fitted = fit_problem(&problem, &OptimOptions::default())?;
    let h = data.horizon;
    let ix_t = problem.coef_names.iter().position(|n| n == "t").unwrap();
    let (mean, var) = if degree == 1 {
        (fitted.beta[ix_t] * h, fitted.cov[(ix_t, ix_t)] * h * h)
    } else {
        let ix_t2 = problem.coef_names.iter().position(|n| n == "t2").unwrap();
        let c1 = 0.5 * h * h;
        let c2 = h * h * h / 3.0;
        let mean = c1 * fitted.beta[ix_t] + c2 * fitted.beta[ix_t2];
        let var = c1 * c1 * fitted.cov[(ix_t, ix_t)]
            + c2 * c2 * fitted.cov[(ix_t2, ix_t2)]
            + 2.0 * c1 * c2 * fitted.cov[(ix_t, ix_t2)];
        (mean, var)
    };
    Ok(ArmEndpoint {
        mean,
        var: var.max(0.0),
        converged: fitted.converged,
    })
}
