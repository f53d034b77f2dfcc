//! Estimand-level contrasts, Wald tests, and the two-step mixture
//! correction for informative dropout.
//!
//! Sign convention: continuous contrasts are treatment minus placebo on the
//! PACC scale (decline is downward, so a positive contrast favors
//! treatment); the survival contrast is the log hazard ratio of treatment
//! versus placebo (negative favors treatment).

use crate::datagen::Arm;
use crate::error::{Error, Result};
use crate::estimators::{
    fit_clda_arm_endpoint, fit_mmrm_arm_endpoint, mmrm::cell_name, DiscontinuationReason,
    FitResult, LongitudinalDataset, SubjectInfo,
};
use crate::transforms::norm_cdf;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimand {
    /// Group difference in PACC change at the final scheduled visit.
    FinalVisit,
    /// Area between the arms' mean PACC curves.
    AreaBetweenCurves,
    /// Log hazard ratio of progression.
    LogHazardRatio,
}

impl Estimand {
    pub fn label(&self) -> &'static str {
        match self {
            Estimand::FinalVisit => "final_visit",
            Estimand::AreaBetweenCurves => "area",
            Estimand::LogHazardRatio => "log_hr",
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ContrastResult {
    pub estimand: Estimand,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p: f64,
    /// `exp(estimate)`, reported for the hazard contrast.
    pub hazard_ratio: Option<f64>,
}

/// Two-sided Wald test with a normal reference.
pub fn wald(estimand: Estimand, estimate: f64, se: f64) -> ContrastResult {
    let z = if estimate == 0.0 {
        0.0
    } else if se > 0.0 {
        estimate / se
    } else {
        f64::INFINITY * estimate.signum()
    };
    let p = if z.is_infinite() {
        0.0
    } else {
        2.0 * (1.0 - norm_cdf(z.abs()))
    };
    ContrastResult {
        estimand,
        estimate,
        se,
        z,
        p,
        hazard_ratio: None,
    }
}

fn require_converged(fit: &FitResult) -> Result<()> {
    if !fit.converged {
        return Err(Error::FitRefused(format!(
            "{} did not converge",
            fit.model
        )));
    }
    Ok(())
}

/// Final-visit treatment contrast. MMRM: difference of the two horizon cell
/// means. cLDA(1): slope interaction scaled by the horizon.
pub fn final_visit_contrast(fit: &FitResult, horizon: f64) -> Result<ContrastResult> {
    require_converged(fit)?;
    match fit.model.as_str() {
        "mmrm" => {
            let trt = cell_name(Arm::Treatment, horizon);
            let pbo = cell_name(Arm::Placebo, horizon);
            let it = fit
                .coef_index(&trt)
                .ok_or_else(|| Error::FitRefused(format!("missing cell {trt}")))?;
            let ip = fit
                .coef_index(&pbo)
                .ok_or_else(|| Error::FitRefused(format!("missing cell {pbo}")))?;
            let est = fit.coef[it] - fit.coef[ip];
            let var = fit.cov[(it, it)] + fit.cov[(ip, ip)] - 2.0 * fit.cov[(it, ip)];
            Ok(wald(Estimand::FinalVisit, est, var.max(0.0).sqrt()))
        }
        "clda1" => {
            let ix = fit
                .coef_index("t_active")
                .ok_or_else(|| Error::FitRefused("missing t_active".into()))?;
            let est = fit.coef[ix] * horizon;
            let se = fit.cov[(ix, ix)].max(0.0).sqrt() * horizon;
            Ok(wald(Estimand::FinalVisit, est, se))
        }
        other => Err(Error::FitRefused(format!(
            "final-visit contrast undefined for {other}"
        ))),
    }
}

/// Area between the fitted mean curves of the quadratic cLDA over
/// `[t0, tT]`: `S = 1/2 b2 (tT^2 - t0^2) + 1/3 b4 (tT^3 - t0^3)` with the
/// delta-method variance from the (b2, b4) covariance block.
pub fn area_between_curves(fit: &FitResult, t0: f64, t_end: f64) -> Result<ContrastResult> {
    require_converged(fit)?;
    let i2 = fit
        .coef_index("t_active")
        .ok_or_else(|| Error::FitRefused("missing t_active coefficient".into()))?;
    let i4 = fit
        .coef_index("t2_active")
        .ok_or_else(|| Error::FitRefused("missing quadratic covariance block".into()))?;
    let c2 = 0.5 * (t_end * t_end - t0 * t0);
    let c4 = (t_end.powi(3) - t0.powi(3)) / 3.0;
    let est = c2 * fit.coef[i2] + c4 * fit.coef[i4];
    let var = c2 * c2 * fit.cov[(i2, i2)]
        + c4 * c4 * fit.cov[(i4, i4)]
        + 2.0 * c2 * c4 * fit.cov[(i2, i4)];
    Ok(wald(Estimand::AreaBetweenCurves, est, var.max(0.0).sqrt()))
}

/// Log hazard ratio for treatment with its Wald test; also reports the
/// hazard ratio itself.
pub fn hazard_contrast(fit: &FitResult) -> Result<ContrastResult> {
    require_converged(fit)?;
    let ix = fit
        .coef_index("treatment")
        .ok_or_else(|| Error::FitRefused("missing treatment coefficient".into()))?;
    let est = fit.coef[ix];
    let se = fit.cov[(ix, ix)].max(0.0).sqrt();
    let mut c = wald(Estimand::LogHazardRatio, est, se);
    c.hazard_ratio = Some(est.exp());
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseModel {
    Mmrm,
    Clda1,
    Clda2,
}

impl BaseModel {
    pub fn label(&self) -> &'static str {
        match self {
            BaseModel::Mmrm => "mmrm",
            BaseModel::Clda1 => "clda1",
            BaseModel::Clda2 => "clda2",
        }
    }

    pub fn estimand(&self) -> Estimand {
        match self {
            BaseModel::Clda2 => Estimand::AreaBetweenCurves,
            _ => Estimand::FinalVisit,
        }
    }
}

/// A treated subject counts as a mixture "dropout" when it discontinued
/// before the horizon for a non-administrative reason (lack of efficacy or
/// adverse event — the reasons a case report form records); administrative
/// attrition is ignorable and stays with the completers.
fn is_mixture_dropout(s: &SubjectInfo, horizon: f64) -> bool {
    match s.dropout {
        Some(d) => {
            d.time < horizon - 1e-9 && d.reason != DiscontinuationReason::Administrative
        }
        None => false,
    }
}

/// Formula-based two-step mixture correction.
///
/// Step 1 fits the base model separately to the treated completers (endpoint
/// mean `mu_c`) and to the placebo arm (reference mean `mu_ref`), both
/// evaluated at the pooled covariate means. Step 2 treats the true treated
/// endpoint as the mixture `(1 - pi) mu_c + pi mu_ref`, where `pi` is the
/// observed treated mixture-dropout fraction by the horizon, so the adjusted
/// treatment-minus-placebo contrast is `(1 - pi)(mu_c - mu_ref)`. The
/// variance combines the two (independent) fits with the binomial
/// delta-method term for `pi`.
pub fn mehrotra_adjust(data: &LongitudinalDataset, base: BaseModel) -> Result<ContrastResult> {
    let horizon = data.horizon;
    let treated: Vec<&SubjectInfo> = data
        .subjects()
        .iter()
        .filter(|s| s.arm == Arm::Treatment)
        .collect();
    if treated.is_empty() {
        return Err(Error::FitRefused("no treated subjects".into()));
    }
    let n_treated = treated.len();
    let n_dropout = treated
        .iter()
        .filter(|s| is_mixture_dropout(s, horizon))
        .count();
    if n_dropout == n_treated {
        return Err(Error::FitRefused("zero treated completers".into()));
    }
    let pi = n_dropout as f64 / n_treated as f64;

    let center = data.covariate_means();
    let keep_completer =
        |s: &SubjectInfo| s.arm == Arm::Treatment && !is_mixture_dropout(s, horizon);
    let keep_placebo = |s: &SubjectInfo| s.arm == Arm::Placebo;
    let (mu_c, mu_ref) = match base {
        BaseModel::Mmrm => (
            fit_mmrm_arm_endpoint(data, &keep_completer, &center)?,
            fit_mmrm_arm_endpoint(data, &keep_placebo, &center)?,
        ),
        BaseModel::Clda1 => (
            fit_clda_arm_endpoint(data, &keep_completer, 1)?,
            fit_clda_arm_endpoint(data, &keep_placebo, 1)?,
        ),
        BaseModel::Clda2 => (
            fit_clda_arm_endpoint(data, &keep_completer, 2)?,
            fit_clda_arm_endpoint(data, &keep_placebo, 2)?,
        ),
    };
    if !mu_c.converged || !mu_ref.converged {
        return Err(Error::FitRefused(format!(
            "{} arm fit did not converge",
            base.label()
        )));
    }
    let gap = mu_c.mean - mu_ref.mean;
    let est = (1.0 - pi) * gap;
    let var = (1.0 - pi).powi(2) * (mu_c.var + mu_ref.var)
        + gap * gap * pi * (1.0 - pi) / n_treated as f64;
    Ok(wald(base.estimand(), est, var.max(0.0).sqrt()))
}
