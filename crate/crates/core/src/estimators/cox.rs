//! Cox proportional hazards via the Efron-approximation partial likelihood.
//!
//! Covariates: treatment indicator, age, APOE4 carriage. Newton-Raphson with
//! step halving, gradient-norm tolerance 1e-8, at most 50 iterations.
//! Constant covariate columns are dropped from the optimization (coefficient
//! 0, no standard error). Monotone likelihood (complete separation) is
//! flagged as non-convergence rather than an error; so is an unidentified
//! coefficient (singular information at the optimum).

use super::{FitResult, SurvivalDataset};
use crate::datagen::Arm;
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

const MAX_ITER: usize = 50;
const GRAD_TOL: f64 = 1e-8;
const SEPARATION_BOUND: f64 = 15.0;

struct Evaluated {
    loglik: f64,
    grad: DVector<f64>,
    info: DMatrix<f64>,
}

fn evaluate(times: &[f64], events: &[bool], x: &[Vec<f64>], beta: &DVector<f64>) -> Evaluated {
    let n = times.len();
    let p = beta.len();
    let eta: Vec<f64> = x
        .iter()
        .map(|xi| (0..p).map(|j| beta[j] * xi[j]).sum::<f64>())
        .collect();
    let w: Vec<f64> = eta.iter().map(|e| e.exp()).collect();

    let mut loglik = 0.0;
    let mut grad = DVector::zeros(p);
    let mut info = DMatrix::zeros(p, p);

    // running risk-set sums, built from the largest time down
    let mut s0 = 0.0;
    let mut s1 = vec![0.0f64; p];
    let mut s2 = vec![0.0f64; p * p];
    let mut e1 = vec![0.0f64; p];
    let mut e2 = vec![0.0f64; p * p];
    let mut m1 = vec![0.0f64; p];
    let mut i = n;
    while i > 0 {
        let t = times[i - 1];
        let mut lo = i;
        while lo > 0 && (times[lo - 1] - t).abs() < 1e-12 {
            lo -= 1;
        }
        for r in lo..i {
            s0 += w[r];
            for a in 0..p {
                s1[a] += w[r] * x[r][a];
                for b in 0..p {
                    s2[a * p + b] += w[r] * x[r][a] * x[r][b];
                }
            }
        }
        let mut d = 0usize;
        let mut e0 = 0.0;
        e1.iter_mut().for_each(|v| *v = 0.0);
        e2.iter_mut().for_each(|v| *v = 0.0);
        for r in lo..i {
            if events[r] {
                d += 1;
                e0 += w[r];
                loglik += eta[r];
                for a in 0..p {
                    grad[a] += x[r][a];
                    e1[a] += w[r] * x[r][a];
                    for b in 0..p {
                        e2[a * p + b] += w[r] * x[r][a] * x[r][b];
                    }
                }
            }
        }
        if d > 0 {
            for l in 0..d {
                let phi = l as f64 / d as f64;
                let d0 = s0 - phi * e0;
                loglik -= d0.ln();
                for a in 0..p {
                    m1[a] = (s1[a] - phi * e1[a]) / d0;
                    grad[a] -= m1[a];
                }
                for a in 0..p {
                    for b in 0..p {
                        let m2 = (s2[a * p + b] - phi * e2[a * p + b]) / d0;
                        info[(a, b)] += m2 - m1[a] * m1[b];
                    }
                }
            }
        }
        i = lo;
    }
    Evaluated { loglik, grad, info }
}

/// Maximize the Efron partial likelihood. Returns log hazard ratios with
/// model-based covariance (inverse observed information).
pub fn fit_coxph(data: &SurvivalDataset) -> Result<FitResult> {
    let rows = data.rows();
    if data.n_events() == 0 {
        return Err(Error::Data("no events in survival dataset".into()));
    }
    let n = rows.len();
    let age_mean = rows.iter().map(|r| r.age).sum::<f64>() / n as f64;
    let apoe_mean = rows.iter().map(|r| r.apoe4).sum::<f64>() / n as f64;
    let times: Vec<f64> = rows.iter().map(|r| r.time).collect();
    let events: Vec<bool> = rows.iter().map(|r| r.event).collect();
    let full: Vec<[f64; 3]> = rows
        .iter()
        .map(|r| {
            [
                f64::from(r.arm == Arm::Treatment),
                r.age - age_mean,
                r.apoe4 - apoe_mean,
            ]
        })
        .collect();
    let coef_names = ["treatment", "age", "apoe4"];
    // drop constant columns: they carry no information and make the
    // observed information singular
    let active: Vec<usize> = (0..3)
        .filter(|&j| {
            let lo = full.iter().map(|x| x[j]).fold(f64::INFINITY, f64::min);
            let hi = full.iter().map(|x| x[j]).fold(f64::NEG_INFINITY, f64::max);
            hi - lo > 1e-12
        })
        .collect();
    if active.is_empty() {
        return Err(Error::Data("all Cox covariates are constant".into()));
    }
    let p = active.len();
    let x: Vec<Vec<f64>> = full
        .iter()
        .map(|r| active.iter().map(|&j| r[j]).collect())
        .collect();

    let mut beta = DVector::zeros(p);
    let mut ev = evaluate(&times, &events, &x, &beta);
    let mut iterations = 0usize;
    let mut separated = false;
    for iter in 0..MAX_ITER {
        iterations = iter + 1;
        if ev.grad.norm() < GRAD_TOL {
            break;
        }
        let step = match ev.info.clone().cholesky() {
            Some(chol) => chol.solve(&ev.grad),
            None => break, // flat or monotone direction
        };
        let mut scale = 1.0;
        let mut accepted = false;
        let slack = 1e-12 * (1.0 + ev.loglik.abs());
        for _ in 0..30 {
            let cand = &beta + &step * scale;
            let cand_ev = evaluate(&times, &events, &x, &cand);
            if cand_ev.loglik.is_finite() && cand_ev.loglik > ev.loglik - slack {
                beta = cand;
                ev = cand_ev;
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
        if beta.iter().any(|b| b.abs() > SEPARATION_BOUND) {
            separated = true;
            break;
        }
    }
    let grad_norm = ev.grad.norm();
    // convergence needs a small score, bounded coefficients, and an
    // invertible information (identifiability)
    let info_chol = ev.info.clone().cholesky();
    let converged = !separated && grad_norm < GRAD_TOL && info_chol.is_some();

    let mut coef = DVector::zeros(3);
    let mut cov = DMatrix::from_element(3, 3, f64::NAN);
    if let Some(chol) = info_chol {
        let cov_active = chol.inverse();
        for (ai, &gi) in active.iter().enumerate() {
            coef[gi] = beta[ai];
            for (aj, &gj) in active.iter().enumerate() {
                cov[(gi, gj)] = cov_active[(ai, aj)];
            }
        }
    } else {
        for (ai, &gi) in active.iter().enumerate() {
            coef[gi] = beta[ai];
        }
    }

    Ok(FitResult {
        model: "coxph".into(),
        coef_names: coef_names.iter().map(|s| s.to_string()).collect(),
        coef,
        cov,
        variance_components: vec![],
        loglik: ev.loglik,
        converged,
        iterations,
        grad_norm,
    })
}
