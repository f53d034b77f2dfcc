//! Simulation of complete multivariate longitudinal Z-score trajectories.
//!
//! Each subject gets covariates, a latent subpopulation (progressor/stable),
//! a 14-dimensional random-effect vector (7 intercepts then 7 slopes), an
//! enrollment time under the common-close design, and a per-visit 7-outcome
//! trajectory
//!
//! `z_k(t) = b0_k + b_age_k * age + b_apoe_k * apoe4
//!           + u0_k + (m(t) * b_year_k + u1_k) * t + eps`,
//!
//! where `m(t)` multiplies the fixed-effect time slope only: 1 for placebo,
//! `1 - effect` for treatment. Residual draws are stored as standard normals
//! on the subject record so a trajectory can be regenerated under a different
//! slope schedule with identical noise (common random numbers).

use crate::diagnosis::Diagnosis;
use crate::dropout::DropoutEvent;
use crate::error::{Error, Result};
use crate::transforms::N_OUTCOMES;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Treatment,
    Placebo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subpopulation {
    Progressor,
    Stable,
}

/// Fixed-effect coefficients for one outcome on the Z scale.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OutcomeFixedEffects {
    pub intercept: f64,
    pub year: f64,
    pub age: f64,
    pub apoe4: f64,
}

impl OutcomeFixedEffects {
    const fn new(intercept: f64, year: f64, age: f64, apoe4: f64) -> Self {
        Self {
            intercept,
            year,
            age,
            apoe4,
        }
    }
}

/// Structured random-effects covariance: a separable correlation between the
/// intercept/slope block and the cross-outcome block,
/// `corr = T (x) R_o` with `T = [[1, r_is], [r_is, 1]]` and
/// `R_o = (1 - r_x) I + r_x J`, scaled by the intercept and slope SDs.
/// Both factors are positive definite for `|r| < 1`, so the product is too.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CovarianceSpec {
    pub intercept_sd: f64,
    pub slope_sd: f64,
    pub cross_outcome_corr: f64,
    pub intercept_slope_corr: f64,
}

impl CovarianceSpec {
    pub fn build(&self) -> DMatrix<f64> {
        let p = N_OUTCOMES;
        let mut cov = DMatrix::zeros(2 * p, 2 * p);
        for i in 0..2 * p {
            for j in 0..2 * p {
                let (ti, oi) = (i / p, i % p);
                let (tj, oj) = (j / p, j % p);
                let sd_i = if ti == 0 {
                    self.intercept_sd
                } else {
                    self.slope_sd
                };
                let sd_j = if tj == 0 {
                    self.intercept_sd
                } else {
                    self.slope_sd
                };
                let t_corr = if ti == tj {
                    1.0
                } else {
                    self.intercept_slope_corr
                };
                let o_corr = if oi == oj {
                    1.0
                } else {
                    self.cross_outcome_corr
                };
                cov[(i, j)] = sd_i * sd_j * t_corr * o_corr;
            }
        }
        cov
    }
}

/// Random-effects covariance: either the structured spec or an explicit
/// 14x14 matrix given row by row.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ReCovariance {
    Structured(CovarianceSpec),
    Explicit { rows: Vec<Vec<f64>> },
}

impl ReCovariance {
    pub fn matrix(&self) -> Result<DMatrix<f64>> {
        match self {
            ReCovariance::Structured(spec) => Ok(spec.build()),
            ReCovariance::Explicit { rows } => {
                let n = 2 * N_OUTCOMES;
                if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                    return Err(Error::Parameter(format!(
                        "explicit covariance must be {n}x{n}"
                    )));
                }
                let mut m = DMatrix::zeros(n, n);
                for (i, row) in rows.iter().enumerate() {
                    for (j, &v) in row.iter().enumerate() {
                        m[(i, j)] = v;
                    }
                }
                if (&m - m.transpose()).abs().max() > 1e-10 {
                    return Err(Error::Parameter("covariance must be symmetric".into()));
                }
                Ok(m)
            }
        }
    }
}

/// Per-subpopulation generative parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubpopParams {
    /// Fixed effects per outcome, in canonical outcome order.
    pub fixed: Vec<OutcomeFixedEffects>,
    pub covariance: ReCovariance,
    /// Residual SD per outcome; a single entry broadcasts to all seven.
    pub residual_sd: Vec<f64>,
}

impl SubpopParams {
    fn residual_sds(&self) -> Result<[f64; N_OUTCOMES]> {
        let sds: Vec<f64> = match self.residual_sd.len() {
            1 => vec![self.residual_sd[0]; N_OUTCOMES],
            N_OUTCOMES => self.residual_sd.clone(),
            n => {
                return Err(Error::Parameter(format!(
                    "residual_sd must have 1 or {N_OUTCOMES} entries, got {n}"
                )))
            }
        };
        if sds.iter().any(|&s| !(s >= 0.0)) {
            return Err(Error::Parameter("residual SDs must be >= 0".into()));
        }
        Ok(sds.try_into().unwrap())
    }
}

/// Covariate generating distributions (truncated normal age, Bernoulli APOE4).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CovariateModel {
    pub age_mean: f64,
    pub age_sd: f64,
    pub age_min: f64,
    pub age_max: f64,
    pub apoe4_prob: f64,
}

impl Default for CovariateModel {
    fn default() -> Self {
        Self {
            age_mean: 74.57,
            age_sd: 5.90,
            age_min: 55.0,
            age_max: 95.0,
            apoe4_prob: 0.54,
        }
    }
}

/// The simulation's ground truth: fixed effects, random-effects covariance,
/// residual SDs per subpopulation, plus the latent progressor proportion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerativeParams {
    pub progressor: SubpopParams,
    pub stable: SubpopParams,
    pub progressor_proportion: f64,
    #[serde(default)]
    pub covariates: CovariateModel,
}

/// Posterior-mean fixed effects for the progressor subpopulation
/// (intercept, year, age, apoe4) in canonical outcome order.
const PROGRESSOR_FIXED: [OutcomeFixedEffects; N_OUTCOMES] = [
    OutcomeFixedEffects::new(-8.244, 0.330, 0.110, 0.572),
    OutcomeFixedEffects::new(-6.897, 0.261, 0.096, 0.039),
    OutcomeFixedEffects::new(-9.458, 0.353, 0.124, 0.141),
    OutcomeFixedEffects::new(0.852, 0.009, 0.007, 0.040),
    OutcomeFixedEffects::new(1.430, 0.047, -0.009, 0.036),
    OutcomeFixedEffects::new(-6.537, 0.082, 0.081, -0.224),
    OutcomeFixedEffects::new(3.458, 0.023, -0.002, 0.343),
];

const STABLE_FIXED: [OutcomeFixedEffects; N_OUTCOMES] = [
    OutcomeFixedEffects::new(-4.913, 0.064, 0.062, 0.218),
    OutcomeFixedEffects::new(-1.840, 0.033, 0.020, 0.465),
    OutcomeFixedEffects::new(-6.364, 0.022, 0.084, 0.622),
    OutcomeFixedEffects::new(-1.385, 0.022, 0.020, 0.115),
    OutcomeFixedEffects::new(0.942, 0.025, -0.011, -0.118),
    OutcomeFixedEffects::new(1.094, 0.006, -0.011, 0.117),
    OutcomeFixedEffects::new(0.261, 0.0007, -0.003, 0.014),
];

/// Default residual SDs per outcome. The four PACC components carry most of
/// the measurement noise; the latent-mixture slope gap between progressors
/// and stable subjects otherwise makes the PACC variance grow so strongly in
/// time that the AR1 repeated-measures analysis becomes anti-conservative.
const DEFAULT_RESIDUAL_SD: [f64; N_OUTCOMES] = [1.2, 1.2, 1.2, 1.2, 0.5, 0.5, 0.5];

impl Default for GenerativeParams {
    fn default() -> Self {
        Self {
            progressor: SubpopParams {
                fixed: PROGRESSOR_FIXED.to_vec(),
                covariance: ReCovariance::Structured(CovarianceSpec {
                    intercept_sd: 0.9,
                    slope_sd: 0.05,
                    cross_outcome_corr: 0.5,
                    intercept_slope_corr: 0.25,
                }),
                residual_sd: DEFAULT_RESIDUAL_SD.to_vec(),
            },
            stable: SubpopParams {
                fixed: STABLE_FIXED.to_vec(),
                covariance: ReCovariance::Structured(CovarianceSpec {
                    intercept_sd: 0.9,
                    slope_sd: 0.02,
                    cross_outcome_corr: 0.5,
                    intercept_slope_corr: 0.25,
                }),
                residual_sd: DEFAULT_RESIDUAL_SD.to_vec(),
            },
            progressor_proportion: 0.24,
            covariates: CovariateModel::default(),
        }
    }
}

impl GenerativeParams {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("generative params: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("params serialize")
    }

    pub fn subpop(&self, s: Subpopulation) -> &SubpopParams {
        match s {
            Subpopulation::Progressor => &self.progressor,
            Subpopulation::Stable => &self.stable,
        }
    }

    /// Validate and precompute Cholesky factors for sampling.
    pub fn prepare(&self) -> Result<PreparedParams> {
        if !(0.0..=1.0).contains(&self.progressor_proportion) {
            return Err(Error::Parameter(
                "progressor_proportion must be in [0,1]".into(),
            ));
        }
        let prep_one = |sp: &SubpopParams, name: &str| -> Result<PreparedSubpop> {
            if sp.fixed.len() != N_OUTCOMES {
                return Err(Error::Parameter(format!(
                    "{name}: expected {N_OUTCOMES} fixed-effect rows"
                )));
            }
            let cov = sp.covariance.matrix()?;
            Ok(PreparedSubpop {
                fixed: sp.fixed.clone().try_into().unwrap(),
                re_chol: psd_cholesky(&cov)
                    .ok_or_else(|| Error::Parameter(format!("{name}: covariance not PSD")))?,
                residual_sd: sp.residual_sds()?,
            })
        };
        Ok(PreparedParams {
            progressor: prep_one(&self.progressor, "progressor")?,
            stable: prep_one(&self.stable, "stable")?,
            progressor_proportion: self.progressor_proportion,
            covariates: self.covariates,
        })
    }
}

/// Cholesky with jitter escalation up to 1e-8; an all-zero matrix factors to
/// zero so degenerate (no random effects) parameterizations stay exact.
fn psd_cholesky(cov: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if cov.iter().all(|&x| x == 0.0) {
        return Some(DMatrix::zeros(cov.nrows(), cov.ncols()));
    }
    if let Some(c) = cov.clone().cholesky() {
        return Some(c.l());
    }
    for exp in [-12i32, -10, -8] {
        let jitter = 10f64.powi(exp);
        let mut m = cov.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(c) = m.cholesky() {
            return Some(c.l());
        }
    }
    None
}

#[derive(Debug, Clone)]
pub struct PreparedSubpop {
    pub fixed: [OutcomeFixedEffects; N_OUTCOMES],
    pub re_chol: DMatrix<f64>,
    pub residual_sd: [f64; N_OUTCOMES],
}

/// Runtime form of [`GenerativeParams`] with Cholesky factors ready.
#[derive(Debug, Clone)]
pub struct PreparedParams {
    pub progressor: PreparedSubpop,
    pub stable: PreparedSubpop,
    pub progressor_proportion: f64,
    pub covariates: CovariateModel,
}

impl PreparedParams {
    pub fn subpop(&self, s: Subpopulation) -> &PreparedSubpop {
        match s {
            Subpopulation::Progressor => &self.progressor,
            Subpopulation::Stable => &self.stable,
        }
    }
}

/// Trial design: sample size, allocation, visit schedule, common-close
/// arithmetic, treatment effect, and master seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialDesign {
    pub n_total: usize,
    /// treatment : placebo randomization ratio
    pub allocation: (u32, u32),
    pub visit_grid: Vec<f64>,
    pub analysis_horizon: f64,
    pub enrollment_duration: f64,
    pub max_follow_up: f64,
    pub effect_size: f64,
    pub seed: u64,
}

impl Default for TrialDesign {
    fn default() -> Self {
        Self {
            n_total: 1000,
            allocation: (1, 1),
            visit_grid: (0..=16).map(|i| i as f64 * 0.5).collect(),
            analysis_horizon: 4.5,
            enrollment_duration: 4.0,
            max_follow_up: 8.0,
            effect_size: 0.0,
            seed: 0,
        }
    }
}

impl TrialDesign {
    pub fn validate(&self) -> Result<()> {
        if self.visit_grid.is_empty() || self.visit_grid[0] != 0.0 {
            return Err(Error::Config("visit grid must start at 0".into()));
        }
        if self.visit_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("visit grid must be strictly increasing".into()));
        }
        if !self
            .visit_grid
            .iter()
            .any(|&t| (t - self.analysis_horizon).abs() < 1e-9)
        {
            return Err(Error::Config(
                "analysis horizon must be a scheduled visit".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.effect_size) {
            return Err(Error::Config("effect size must be in [0,1]".into()));
        }
        if self.max_follow_up < self.analysis_horizon {
            return Err(Error::Config(
                "max follow-up must cover the analysis horizon".into(),
            ));
        }
        if self.enrollment_duration < 0.0 {
            return Err(Error::Config("enrollment duration must be >= 0".into()));
        }
        if self.allocation.0 + self.allocation.1 == 0 {
            return Err(Error::Config("allocation ratio cannot be 0:0".into()));
        }
        Ok(())
    }

    /// Calendar time of study close under the common-close design.
    pub fn close_time(&self) -> f64 {
        self.enrollment_duration + self.analysis_horizon
    }

    /// Fixed-slope multiplier for an arm: 1 for placebo, `1 - effect` for
    /// treatment. The multiplier never touches the random slope.
    pub fn slope_multiplier(&self, arm: Arm) -> f64 {
        match arm {
            Arm::Placebo => 1.0,
            Arm::Treatment => 1.0 - self.effect_size,
        }
    }

    /// Grid times within a follow-up limit.
    pub fn visits_within(&self, follow_up_limit: f64) -> usize {
        self.visit_grid
            .iter()
            .take_while(|&&t| t <= follow_up_limit + 1e-9)
            .count()
    }
}

/// Piecewise-constant multiplier on the fixed time slope; the mean trajectory
/// stays continuous because the multiplier weights elapsed time segments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SlopeSchedule {
    Constant(f64),
    /// `before` applies up to `t_break`, `after` beyond it.
    PiecewiseAt {
        t_break: f64,
        before: f64,
        after: f64,
    },
}

impl SlopeSchedule {
    /// Effective slope-weighted time at `t` (so the fixed-slope contribution
    /// is `year_coef * weighted_time(t)`).
    pub fn weighted_time(&self, t: f64) -> f64 {
        match *self {
            SlopeSchedule::Constant(m) => m * t,
            SlopeSchedule::PiecewiseAt {
                t_break,
                before,
                after,
            } => before * t.min(t_break) + after * (t - t_break).max(0.0),
        }
    }
}

/// One simulated subject: covariates, latent class, random effects, stored
/// residual draws, and (once filled) complete/observed trajectories aligned
/// to the visit grid inside the follow-up limit.
#[derive(Debug, Clone)]
pub struct SubjectRecord {
    pub id: u32,
    pub arm: Arm,
    pub age: f64,
    pub apoe4: u8,
    pub subpopulation: Subpopulation,
    /// 14-vector: intercepts for the 7 outcomes, then slopes.
    pub random_effects: DVector<f64>,
    pub enrollment_time: f64,
    pub follow_up_limit: f64,
    /// Standard-normal residual draws per visit and outcome.
    pub noise: Vec<[f64; N_OUTCOMES]>,
    pub complete_trajectory: Vec<[f64; N_OUTCOMES]>,
    pub observed_trajectory: Vec<Option<[f64; N_OUTCOMES]>>,
    pub dropout: Option<DropoutEvent>,
    pub diagnosis_sequence: Vec<Diagnosis>,
}

impl SubjectRecord {
    pub fn n_visits(&self) -> usize {
        self.complete_trajectory.len()
    }
}

/// Draw covariates, latent subpopulation, arm, and random effects for one
/// subject. Trajectory, enrollment, and dropout fields are filled by later
/// pipeline stages.
pub fn draw_subject(
    params: &PreparedParams,
    design: &TrialDesign,
    id: u32,
    rng: &mut impl Rng,
) -> SubjectRecord {
    let cv = &params.covariates;
    let age = loop {
        let a: f64 = cv.age_mean + cv.age_sd * rng.sample::<f64, _>(StandardNormal);
        if a >= cv.age_min && a <= cv.age_max {
            break a;
        }
    };
    let apoe4 = u8::from(rng.gen_bool(cv.apoe4_prob));
    let subpopulation = if rng.gen_bool(params.progressor_proportion) {
        Subpopulation::Progressor
    } else {
        Subpopulation::Stable
    };
    let p_treat = design.allocation.0 as f64 / (design.allocation.0 + design.allocation.1) as f64;
    let arm = if rng.gen_bool(p_treat) {
        Arm::Treatment
    } else {
        Arm::Placebo
    };
    let chol = &params.subpop(subpopulation).re_chol;
    let z = DVector::from_fn(2 * N_OUTCOMES, |_, _| rng.sample(StandardNormal));
    let random_effects = chol * z;
    SubjectRecord {
        id,
        arm,
        age,
        apoe4,
        subpopulation,
        random_effects,
        enrollment_time: 0.0,
        follow_up_limit: design.max_follow_up,
        noise: Vec::new(),
        complete_trajectory: Vec::new(),
        observed_trajectory: Vec::new(),
        dropout: None,
        diagnosis_sequence: Vec::new(),
    }
}

/// Uniform enrollment over the accrual window; every subject is followed to
/// study close (enrollment duration + analysis horizon) capped at the maximum
/// follow-up, so `follow_up_limit >= analysis_horizon` always holds.
pub fn enrollment_and_followup(design: &TrialDesign, rng: &mut impl Rng) -> (f64, f64) {
    let enrollment = if design.enrollment_duration > 0.0 {
        rng.gen_range(0.0..design.enrollment_duration)
    } else {
        0.0
    };
    let follow_up = design.max_follow_up.min(design.close_time() - enrollment);
    (enrollment, follow_up)
}

/// Draw and store standard-normal residuals for every visit within the
/// subject's follow-up limit.
pub fn draw_noise(subject: &mut SubjectRecord, design: &TrialDesign, rng: &mut impl Rng) {
    let n = design.visits_within(subject.follow_up_limit);
    subject.noise = (0..n)
        .map(|_| std::array::from_fn(|_| rng.sample(StandardNormal)))
        .collect();
}

/// Fill the complete trajectory from the model equation under a slope
/// schedule, reusing the stored residual draws.
pub fn fill_trajectory(
    subject: &mut SubjectRecord,
    params: &PreparedParams,
    design: &TrialDesign,
    schedule: SlopeSchedule,
) {
    let sp = params.subpop(subject.subpopulation);
    let n = subject.noise.len();
    let mut traj = Vec::with_capacity(n);
    for (j, t) in design.visit_grid.iter().take(n).enumerate() {
        let wt = schedule.weighted_time(*t);
        let mut row = [0.0; N_OUTCOMES];
        for (k, cell) in row.iter_mut().enumerate() {
            let fe = &sp.fixed[k];
            *cell = fe.intercept
                + fe.age * subject.age
                + fe.apoe4 * subject.apoe4 as f64
                + subject.random_effects[k]
                + fe.year * wt
                + subject.random_effects[N_OUTCOMES + k] * t
                + sp.residual_sd[k] * subject.noise[j][k];
        }
        traj.push(row);
    }
    subject.complete_trajectory = traj;
}

/// Draw residuals and fill the trajectory under the arm's standard slope
/// multiplier.
pub fn simulate_trajectory(
    subject: &mut SubjectRecord,
    params: &PreparedParams,
    design: &TrialDesign,
    rng: &mut impl Rng,
) {
    draw_noise(subject, design, rng);
    let m = design.slope_multiplier(subject.arm);
    fill_trajectory(subject, params, design, SlopeSchedule::Constant(m));
}
