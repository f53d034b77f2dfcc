//! Mixed model of repeated measures.
//!
//! Response: change from baseline in PACC at each post-baseline visit.
//! Fixed effects: one cell mean per (arm, visit) plus baseline PACC, age, and
//! APOE4 (cell-means-by-visit-within-arm parameterization, so the final-visit
//! treatment contrast is a difference of two cells). Within-subject
//! covariance: sigma^2 * AR1(rho) on the post-baseline visit grid, estimated
//! by REML over the transformed pair (log sigma, atanh rho). The likelihood
//! uses whichever visits a subject has (monotone or not).

use super::block::{accumulate, PatternTable, SubjectBlock};
use super::optim::{minimize, OptimOptions};
use super::{ArmEndpoint, CovariateMeans, FitResult, LongitudinalDataset, SubjectInfo};
use crate::datagen::Arm;
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

pub fn cell_name(arm: Arm, t: f64) -> String {
    match arm {
        Arm::Treatment => format!("trt@{t:.2}"),
        Arm::Placebo => format!("pbo@{t:.2}"),
    }
}

struct Problem {
    blocks: Vec<SubjectBlock>,
    pattern_keys: Vec<Vec<u16>>,
    p: usize,
    n_obs: usize,
    coef_names: Vec<String>,
    init_var: f64,
}

enum Design<'a> {
    TwoArm,
    SingleArm { center: &'a CovariateMeans },
}

fn build_problem(
    data: &LongitudinalDataset,
    keep: &dyn Fn(&SubjectInfo) -> bool,
    design: Design<'_>,
) -> Result<Problem> {
    let times = data.post_baseline_times();
    let t_count = times.len();
    if t_count < 2 {
        return Err(Error::Data(
            "MMRM needs at least 2 post-baseline visits".into(),
        ));
    }
    let (n_cells, coef_names, center) = match &design {
        Design::TwoArm => {
            let mut names: Vec<String> = Vec::new();
            for arm in [Arm::Treatment, Arm::Placebo] {
                for &t in &times {
                    names.push(cell_name(arm, t));
                }
            }
            (2 * t_count, names, None)
        }
        Design::SingleArm { center } => {
            let names: Vec<String> = times.iter().map(|&t| format!("mean@{t:.2}")).collect();
            (t_count, names, Some(**center))
        }
    };

    // centering point: supplied reference for single-arm fits, sample means
    // of the kept subjects otherwise
    let kept: Vec<&SubjectInfo> = data
        .subjects()
        .iter()
        .filter(|s| keep(s) && data.baseline_of(s.id).is_some())
        .collect();
    if kept.is_empty() {
        return Err(Error::Data("no subjects with baseline PACC".into()));
    }
    let center = center.unwrap_or_else(|| {
        let n = kept.len() as f64;
        CovariateMeans {
            baseline: kept
                .iter()
                .map(|s| data.baseline_of(s.id).unwrap())
                .sum::<f64>()
                / n,
            age: kept.iter().map(|s| s.age).sum::<f64>() / n,
            apoe4: kept.iter().map(|s| s.apoe4).sum::<f64>() / n,
        }
    });

    // per-subject centered covariates (baseline, age, apoe4); constant
    // columns carry no information next to the cell means and would make the
    // design singular, so they are dropped
    let raw_covs: Vec<[f64; 3]> = kept
        .iter()
        .map(|s| {
            [
                data.baseline_of(s.id).unwrap() - center.baseline,
                s.age - center.age,
                s.apoe4 - center.apoe4,
            ]
        })
        .collect();
    let active_covs: Vec<usize> = (0..3)
        .filter(|&j| {
            let lo = raw_covs.iter().map(|c| c[j]).fold(f64::INFINITY, f64::min);
            let hi = raw_covs.iter().map(|c| c[j]).fold(f64::NEG_INFINITY, f64::max);
            hi - lo > 1e-12
        })
        .collect();
    let p = n_cells + active_covs.len();
    let mut coef_names = coef_names;
    for &j in &active_covs {
        coef_names.push(["baseline_pacc", "age", "apoe4"][j].into());
    }

    let time_index = |t: f64| -> Option<usize> {
        times.iter().position(|&v| (v - t).abs() < 1e-9)
    };
    let grouped = data.grouped();
    let mut patterns = PatternTable::default();
    let mut blocks = Vec::with_capacity(kept.len());
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut arm_visit_seen = [vec![false; t_count], vec![false; t_count]];
    let m = p + 1;
    for (s, covs) in kept.iter().zip(&raw_covs) {
        let obs = &grouped[&s.id];
        let baseline = data.baseline_of(s.id).unwrap();
        let mut key: Vec<u16> = Vec::new();
        let mut rows: Vec<(usize, f64)> = Vec::new();
        for &(t, y) in obs {
            if t <= 1e-12 {
                continue;
            }
            if let Some(ix) = time_index(t) {
                key.push(ix as u16);
                rows.push((ix, y - baseline));
            }
        }
        if rows.is_empty() {
            continue;
        }
        let pattern = patterns.intern(key);
        let mut xy = vec![0.0f64; rows.len() * m];
        for (r, (ix, dy)) in rows.iter().enumerate() {
            let cell = match design {
                Design::TwoArm => match s.arm {
                    Arm::Treatment => *ix,
                    Arm::Placebo => t_count + *ix,
                },
                Design::SingleArm { .. } => *ix,
            };
            let arm_slot = if s.arm == Arm::Treatment { 0 } else { 1 };
            arm_visit_seen[arm_slot][*ix] = true;
            xy[r * m + cell] = 1.0;
            for (slot, &j) in active_covs.iter().enumerate() {
                xy[r * m + n_cells + slot] = covs[j];
            }
            xy[r * m + p] = *dy;
            sum += dy;
            sum_sq += dy * dy;
        }
        blocks.push(SubjectBlock {
            pattern,
            n: rows.len(),
            xy,
        });
    }
    if blocks.is_empty() {
        return Err(Error::Data("no post-baseline observations".into()));
    }
    if matches!(design, Design::TwoArm) {
        for seen in &arm_visit_seen {
            if seen.iter().filter(|&&b| b).count() < 2 {
                return Err(Error::Data(
                    "each arm needs data at 2+ post-baseline visits".into(),
                ));
            }
        }
    }
    let n_obs: usize = blocks.iter().map(|b| b.n).sum();
    let mean = sum / n_obs as f64;
    let init_var = (sum_sq / n_obs as f64 - mean * mean).max(1e-4);
    Ok(Problem {
        blocks,
        pattern_keys: patterns.keys().to_vec(),
        p,
        n_obs,
        coef_names,
        init_var,
    })
}

/// AR1 correlation over the visit-index pattern, inverted via Cholesky;
/// returns (inverse, log-determinant).
fn ar1_inverse(key: &[u16], rho: f64) -> Option<(DMatrix<f64>, f64)> {
    let n = key.len();
    let mut r = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let lag = (key[i] as i32 - key[j] as i32).unsigned_abs();
            r[(i, j)] = rho.powi(lag as i32);
        }
    }
    let chol = r.cholesky()?;
    let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Some((chol.inverse(), logdet))
}

struct Fitted {
    beta: DVector<f64>,
    cov: DMatrix<f64>,
    sigma2: f64,
    rho: f64,
    loglik: f64,
    converged: bool,
    iterations: usize,
    grad_norm: f64,
}

fn fit_problem(problem: &Problem, opts: &OptimOptions) -> Result<Fitted> {
    let p = problem.p;
    let n = problem.n_obs as f64;
    // everything rho-dependent is cached: moving sigma at fixed rho is free
    let rho_cache: std::cell::RefCell<std::collections::HashMap<u64, Option<(f64, f64, f64)>>> =
        std::cell::RefCell::new(std::collections::HashMap::new());
    let rho_parts = |rho: f64| -> Option<(f64, f64, f64)> {
        if let Some(v) = rho_cache.borrow().get(&rho.to_bits()) {
            return *v;
        }
        let compute = || -> Option<(f64, f64, f64)> {
            let mut mats = Vec::with_capacity(problem.pattern_keys.len());
            for key in &problem.pattern_keys {
                mats.push(ar1_inverse(key, rho)?);
            }
            let acc = accumulate(&problem.blocks, &mats, p);
            let chol = acc.a.clone().cholesky()?;
            let beta = chol.solve(&acc.b);
            let rss = (acc.q - acc.b.dot(&beta)).max(1e-300);
            let logdet_a = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            Some((acc.logdet, logdet_a, rss))
        };
        let v = compute();
        rho_cache.borrow_mut().insert(rho.to_bits(), v);
        v
    };
    // REML criterion per observation in (log sigma, atanh rho); the residual
    // variance is floored so degenerate (noise-free) responses stay bounded
    let criterion = |theta: &[f64]| -> f64 {
        let sigma2 = (2.0 * theta[0]).exp().max(1e-10);
        let rho = theta[1].tanh().clamp(-0.999, 0.999);
        match rho_parts(rho) {
            Some((logdet_r, logdet_a, rss)) => {
                ((n - p as f64) * sigma2.ln() + logdet_r + logdet_a + rss / sigma2) / n
            }
            None => f64::INFINITY,
        }
    };

    // profiled pre-scan over rho gives a tight simplex start
    let mut init = [0.5 * problem.init_var.max(1e-8).ln(), 0.55f64.atanh()];
    let mut best = f64::INFINITY;
    for rho in [0.15, 0.35, 0.5, 0.65, 0.8, 0.92] {
        if let Some((logdet_r, logdet_a, rss)) = rho_parts(rho) {
            let sigma2 = (rss / (n - p as f64)).max(1e-10);
            let crit =
                ((n - p as f64) * sigma2.ln() + logdet_r + logdet_a + rss / sigma2) / n;
            if crit < best {
                best = crit;
                init = [0.5 * sigma2.ln(), rho.atanh()];
            }
        }
    }
    let opts = OptimOptions {
        initial_step: 0.08,
        ..opts.clone()
    };
    let opt = minimize(criterion, &init, &opts);

    let sigma2 = (2.0 * opt.x[0]).exp().max(1e-10);
    let rho = opt.x[1].tanh().clamp(-0.999, 0.999);
    let mut mats = Vec::with_capacity(problem.pattern_keys.len());
    for key in &problem.pattern_keys {
        let m = ar1_inverse(key, rho)
            .ok_or_else(|| Error::Covariance("AR1 correlation not PD at optimum".into()))?;
        mats.push(m);
    }
    let acc = accumulate(&problem.blocks, &mats, p);
    let chol = acc
        .a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SingularDesign("X'V^-1X singular in MMRM".into()))?;
    let beta = chol.solve(&acc.b);
    let cov = chol.inverse() * sigma2;
    Ok(Fitted {
        beta,
        cov,
        sigma2,
        rho,
        loglik: -0.5 * opt.f * n,
        converged: opt.converged,
        iterations: opt.evals,
        grad_norm: opt.grad_norm,
    })
}

/// Fit the two-arm MMRM. Subjects without a baseline PACC are excluded
/// (baseline is a covariate here).
pub fn fit_mmrm(data: &LongitudinalDataset) -> Result<FitResult> {
    fit_mmrm_with(data, &OptimOptions::default())
}

pub fn fit_mmrm_with(data: &LongitudinalDataset, opts: &OptimOptions) -> Result<FitResult> {
    let problem = build_problem(data, &|_| true, Design::TwoArm)?;
    let fitted = fit_problem(&problem, opts)?;
    Ok(FitResult {
        model: "mmrm".into(),
        coef_names: problem.coef_names,
        coef: fitted.beta,
        cov: fitted.cov,
        variance_components: vec![
            ("sigma2".into(), fitted.sigma2),
            ("rho".into(), fitted.rho),
        ],
        loglik: fitted.loglik,
        converged: fitted.converged,
        iterations: fitted.iterations,
        grad_norm: fitted.grad_norm,
    })
}

/// Single-group MMRM endpoint: the model-estimated mean change at the
/// horizon, with covariates centered at the shared reference values so
/// endpoints from different subsets are comparable.
pub fn fit_mmrm_arm_endpoint(
    data: &LongitudinalDataset,
    keep: &dyn Fn(&SubjectInfo) -> bool,
    center: &CovariateMeans,
) -> Result<ArmEndpoint> {
    let problem = build_problem(data, keep, Design::SingleArm { center })?;
    let fitted = fit_problem(&problem, &OptimOptions::default())?;
    let name = format!("mean@{:.2}", data.horizon);
    let ix = problem
        .coef_names
        .iter()
        .position(|n| *n == name)
        .ok_or_else(|| Error::Data("horizon cell missing from single-arm fit".into()))?;
    Ok(ArmEndpoint {
        mean: fitted.beta[ix],
        var: fitted.cov[(ix, ix)].max(0.0),
        converged: fitted.converged,
    })
}
