//! Competing analysis models: MMRM, cLDA (linear/quadratic), Cox PH, and
//! Kaplan-Meier, plus the shared generalized-least-squares kernel.
//!
//! All fitters are pure functions of a dataset, canonicalize row order
//! internally, and return a [`FitResult`] carrying named coefficients, their
//! covariance, variance components, and convergence metadata. Downstream
//! contrasts refuse non-converged fits.

mod block;
pub mod clda;
pub mod cox;
pub mod gls;
pub mod km;
pub mod mmrm;
pub mod optim;

pub use clda::{fit_clda, fit_clda_arm_endpoint, fit_clda_with};
pub use cox::fit_coxph;
pub use gls::gls_estimate;
pub use km::{kaplan_meier, KmCurve};
pub use mmrm::{fit_mmrm, fit_mmrm_arm_endpoint, fit_mmrm_with};

use crate::datagen::Arm;
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Operationally recorded discontinuation reason (what a trial's case report
/// form captures; distinct from the simulation's latent cause labels).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscontinuationReason {
    LackOfEfficacy,
    AdverseEvent,
    Administrative,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Discontinuation {
    pub time: f64,
    pub reason: DiscontinuationReason,
}

/// Per-subject covariates and trial-operational dropout status.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectInfo {
    pub id: u32,
    pub arm: Arm,
    pub age: f64,
    pub apoe4: f64,
    pub dropout: Option<Discontinuation>,
}

/// One longitudinal observation (PACC at a scheduled visit).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LongRow {
    pub subject: u32,
    pub time: f64,
    pub pacc: f64,
}

/// Longitudinal analysis dataset restricted to `[0, horizon]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LongitudinalDataset {
    rows: Vec<LongRow>,
    subjects: Vec<SubjectInfo>,
    pub horizon: f64,
    /// Scheduled analysis visit times, baseline included, ascending.
    pub visit_times: Vec<f64>,
}

impl LongitudinalDataset {
    /// Build a dataset, canonicalizing row order to (subject, time) and
    /// enforcing at most one row per (subject, visit) on scheduled times.
    pub fn new(
        mut rows: Vec<LongRow>,
        mut subjects: Vec<SubjectInfo>,
        visit_times: Vec<f64>,
        horizon: f64,
    ) -> Result<Self> {
        if visit_times.is_empty() || visit_times[0] != 0.0 {
            return Err(Error::Data("visit times must start at baseline 0".into()));
        }
        subjects.sort_by_key(|s| s.id);
        if subjects.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(Error::Data("duplicate subject ids".into()));
        }
        rows.retain(|r| r.time <= horizon + 1e-9);
        rows.sort_by(|a, b| {
            (a.subject, a.time)
                .partial_cmp(&(b.subject, b.time))
                .unwrap()
        });
        for w in rows.windows(2) {
            if w[0].subject == w[1].subject && (w[0].time - w[1].time).abs() < 1e-9 {
                return Err(Error::Data(format!(
                    "duplicate visit for subject {} at t={}",
                    w[0].subject, w[0].time
                )));
            }
        }
        let on_grid = |t: f64| visit_times.iter().any(|&v| (v - t).abs() < 1e-9);
        if let Some(r) = rows.iter().find(|r| !on_grid(r.time)) {
            return Err(Error::Data(format!(
                "visit time {} not on the analysis grid",
                r.time
            )));
        }
        Ok(Self {
            rows,
            subjects,
            horizon,
            visit_times,
        })
    }

    pub fn rows(&self) -> &[LongRow] {
        &self.rows
    }

    pub fn subjects(&self) -> &[SubjectInfo] {
        &self.subjects
    }

    pub fn subject(&self, id: u32) -> Option<&SubjectInfo> {
        self.subjects
            .binary_search_by_key(&id, |s| s.id)
            .ok()
            .map(|i| &self.subjects[i])
    }

    /// Post-baseline visit times in `(0, horizon]`.
    pub fn post_baseline_times(&self) -> Vec<f64> {
        self.visit_times
            .iter()
            .copied()
            .filter(|&t| t > 1e-12 && t <= self.horizon + 1e-9)
            .collect()
    }

    /// Mean (baseline PACC, age, apoe4) over subjects with a baseline row;
    /// the common centering point for arm-specific endpoint fits.
    pub fn covariate_means(&self) -> CovariateMeans {
        let mut n = 0usize;
        let mut sums = [0.0f64; 3];
        for s in &self.subjects {
            if let Some(b) = self.baseline_of(s.id) {
                sums[0] += b;
                sums[1] += s.age;
                sums[2] += s.apoe4;
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        CovariateMeans {
            baseline: sums[0] / n,
            age: sums[1] / n,
            apoe4: sums[2] / n,
        }
    }

    pub fn baseline_of(&self, id: u32) -> Option<f64> {
        // rows are sorted by (subject, time); baseline is the first row
        let ix = self.rows.partition_point(|r| r.subject < id);
        self.rows
            .get(ix)
            .filter(|r| r.subject == id && r.time.abs() < 1e-9)
            .map(|r| r.pacc)
    }

    /// Per-subject observation lists (time, pacc), in canonical order.
    pub fn grouped(&self) -> BTreeMap<u32, Vec<(f64, f64)>> {
        let mut map: BTreeMap<u32, Vec<(f64, f64)>> = BTreeMap::new();
        for r in &self.rows {
            map.entry(r.subject).or_default().push((r.time, r.pacc));
        }
        map
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CovariateMeans {
    pub baseline: f64,
    pub age: f64,
    pub apoe4: f64,
}

/// One time-to-event record.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SurvRow {
    pub subject: u32,
    pub arm: Arm,
    pub time: f64,
    pub event: bool,
    pub age: f64,
    pub apoe4: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurvivalDataset {
    rows: Vec<SurvRow>,
}

impl SurvivalDataset {
    pub fn new(mut rows: Vec<SurvRow>) -> Result<Self> {
        if rows.iter().any(|r| !(r.time > 0.0)) {
            return Err(Error::Data("event/censor times must be positive".into()));
        }
        rows.sort_by(|a, b| (a.time, a.subject).partial_cmp(&(b.time, b.subject)).unwrap());
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[SurvRow] {
        &self.rows
    }

    pub fn n_events(&self) -> usize {
        self.rows.iter().filter(|r| r.event).count()
    }
}

/// Coefficients, covariance, variance components, and convergence metadata
/// for any fitted model.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: String,
    pub coef_names: Vec<String>,
    pub coef: DVector<f64>,
    /// Model-based covariance of the coefficients.
    pub cov: DMatrix<f64>,
    pub variance_components: Vec<(String, f64)>,
    /// Log-likelihood (REML criterion for MMRM, ML for cLDA, partial for
    /// Cox), up to an additive constant.
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Norm of the criterion gradient at the reported optimum (per
    /// observation for the mixed models).
    pub grad_norm: f64,
}

impl FitResult {
    pub fn coef_index(&self, name: &str) -> Option<usize> {
        self.coef_names.iter().position(|n| n == name)
    }

    pub fn coef_named(&self, name: &str) -> Option<f64> {
        self.coef_index(name).map(|i| self.coef[i])
    }

    pub fn se_named(&self, name: &str) -> Option<f64> {
        self.coef_index(name).map(|i| {
            let v = self.cov[(i, i)];
            if v.is_nan() {
                f64::NAN
            } else {
                v.max(0.0).sqrt()
            }
        })
    }
}

/// Model-estimated endpoint mean (and its variance) for a single arm,
/// evaluated at shared reference covariate values. Used by the mixture
/// correction.
#[derive(Debug, Clone, Copy)]
pub struct ArmEndpoint {
    pub mean: f64,
    pub var: f64,
    pub converged: bool,
}
