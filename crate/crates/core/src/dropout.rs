//! Three-cause missingness mechanism: inefficacy, intolerability, MCAR.
//!
//! Dropout causes are assigned independently of the trajectory; cause-specific
//! counterfactual adjustments then rewrite the *complete* trajectory (treated
//! inefficacy dropouts lose the whole benefit, treated intolerability dropouts
//! keep only part of it after dropping) by regenerating from the identical
//! stored noise draws. Censoring restricts the adjusted complete data to the
//! visits at or before the dropout time.

use crate::datagen::{
    fill_trajectory, Arm, PreparedParams, SlopeSchedule, SubjectRecord, TrialDesign,
};
use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutCause {
    Inefficacy,
    Intolerability,
    Mcar,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutEvent {
    pub cause: DropoutCause,
    pub time: f64,
}

/// Per-arm cause probabilities and the MCAR attrition rate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ArmDropout {
    pub inefficacy_prob: f64,
    pub intolerability_prob: f64,
    pub mcar_annual_rate: f64,
}

impl ArmDropout {
    pub fn none() -> Self {
        Self {
            inefficacy_prob: 0.0,
            intolerability_prob: 0.0,
            mcar_annual_rate: 0.0,
        }
    }
}

/// Dropout mechanism specification. Scheduled causes drop the subject
/// immediately after the six-month (intolerability) or twelve-month
/// (inefficacy) visit; MCAR dropout time is uniform on `(0, 1/rate)`, which
/// yields exactly linear attrition at `rate` per year.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DropoutSpec {
    pub treatment: ArmDropout,
    pub placebo: ArmDropout,
    pub intolerability_time: f64,
    pub inefficacy_time: f64,
    /// Fraction of the treatment benefit retained after an intolerability
    /// dropout (the unobserved benefit is diminished by 15%).
    pub intolerability_benefit_retention: f64,
}

impl DropoutSpec {
    /// Defaults encoding the simulated dropout rates: treated inefficacy 15%
    /// under the null / 8% under an alternative, treated intolerability 10%,
    /// placebo inefficacy 15%, MCAR 5%/year in both arms.
    pub fn for_effect(effect_size: f64) -> Self {
        Self {
            treatment: ArmDropout {
                inefficacy_prob: if effect_size > 0.0 { 0.08 } else { 0.15 },
                intolerability_prob: 0.10,
                mcar_annual_rate: 0.05,
            },
            placebo: ArmDropout {
                inefficacy_prob: 0.15,
                intolerability_prob: 0.0,
                mcar_annual_rate: 0.05,
            },
            intolerability_time: 0.5,
            inefficacy_time: 1.0,
            intolerability_benefit_retention: 0.85,
        }
    }

    pub fn arm(&self, arm: Arm) -> &ArmDropout {
        match arm {
            Arm::Treatment => &self.treatment,
            Arm::Placebo => &self.placebo,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, a) in [("treatment", &self.treatment), ("placebo", &self.placebo)] {
            let causes = [a.inefficacy_prob, a.intolerability_prob];
            if causes.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::Config(format!("{name}: cause probabilities in [0,1]")));
            }
            if causes.iter().sum::<f64>() > 1.0 + 1e-12 {
                return Err(Error::Config(format!(
                    "{name}: cause probabilities sum over 1"
                )));
            }
            if a.mcar_annual_rate < 0.0 {
                return Err(Error::Config(format!("{name}: MCAR rate must be >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.intolerability_benefit_retention) {
            return Err(Error::Config("benefit retention in [0,1]".into()));
        }
        Ok(())
    }
}

/// Assign at most one dropout cause. A single multinomial draw selects the
/// scheduled cause (inefficacy at 12 months, intolerability at 6 months, or
/// neither); an independent MCAR time applies when it lands inside the
/// subject's follow-up and before any scheduled time. Simultaneous times
/// resolve to the scheduled cause.
pub fn assign_dropout(
    subject: &SubjectRecord,
    spec: &DropoutSpec,
    rng: &mut impl Rng,
) -> Option<DropoutEvent> {
    let arm = spec.arm(subject.arm);
    let u: f64 = rng.gen();
    let scheduled = if u < arm.inefficacy_prob {
        Some(DropoutEvent {
            cause: DropoutCause::Inefficacy,
            time: spec.inefficacy_time,
        })
    } else if u < arm.inefficacy_prob + arm.intolerability_prob {
        Some(DropoutEvent {
            cause: DropoutCause::Intolerability,
            time: spec.intolerability_time,
        })
    } else {
        None
    };
    let mcar_time = if arm.mcar_annual_rate > 0.0 {
        Some(rng.gen_range(0.0..1.0 / arm.mcar_annual_rate))
    } else {
        None
    };
    let mcar = mcar_time.filter(|&t| {
        t < subject.follow_up_limit && scheduled.map_or(true, |s| t < s.time)
    });
    match (mcar, scheduled) {
        (Some(t), _) => Some(DropoutEvent {
            cause: DropoutCause::Mcar,
            time: t,
        }),
        (None, s) => s,
    }
}

/// Rewrite the complete trajectory for the dropout cause, reusing the
/// subject's stored noise draws so the complete-vs-observed contrast reflects
/// the mechanism rather than fresh Monte Carlo noise.
///
/// Treated inefficacy dropouts are regenerated with no benefit over the whole
/// trajectory; treated intolerability dropouts keep the full benefit up to
/// the dropout visit and 85% of it afterwards. Placebo subjects, MCAR
/// dropouts, and completers are unchanged (completers and MCAR dropouts share
/// the arm's mean profile).
pub fn apply_counterfactual(
    subject: &mut SubjectRecord,
    params: &PreparedParams,
    design: &TrialDesign,
    spec: &DropoutSpec,
) {
    if subject.arm == Arm::Placebo {
        return;
    }
    let effect = design.effect_size;
    match subject.dropout {
        Some(DropoutEvent {
            cause: DropoutCause::Inefficacy,
            ..
        }) => {
            fill_trajectory(subject, params, design, SlopeSchedule::Constant(1.0));
        }
        Some(DropoutEvent {
            cause: DropoutCause::Intolerability,
            ..
        }) => {
            fill_trajectory(
                subject,
                params,
                design,
                SlopeSchedule::PiecewiseAt {
                    t_break: spec.intolerability_time,
                    before: 1.0 - effect,
                    after: 1.0 - spec.intolerability_benefit_retention * effect,
                },
            );
        }
        _ => {}
    }
}

/// Restrict the adjusted complete trajectory to visits at or before the
/// dropout time ("immediately after" a visit means that visit is the last
/// observed one). With no dropout, observed equals complete.
pub fn censor(subject: &mut SubjectRecord, design: &TrialDesign) {
    let cutoff = subject.dropout.map_or(f64::INFINITY, |d| d.time);
    subject.observed_trajectory = subject
        .complete_trajectory
        .iter()
        .zip(&design.visit_grid)
        .map(|(row, &t)| if t <= cutoff + 1e-9 { Some(*row) } else { None })
        .collect();
}

/// Follow-up limit of the observed data: dropout truncates the complete
/// follow-up, so Cox event times are censored at dropout.
pub fn observed_follow_up(subject: &SubjectRecord) -> f64 {
    subject
        .dropout
        .map_or(subject.follow_up_limit, |d| d.time.min(subject.follow_up_limit))
}
