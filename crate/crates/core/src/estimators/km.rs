//! Kaplan-Meier product-limit estimator with Greenwood variance.

use super::{SurvRow, SurvivalDataset};
use crate::datagen::Arm;
use crate::error::{Error, Result};

/// Step function of survival probability over the distinct event times.
#[derive(Debug, Clone)]
pub struct KmCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    /// Greenwood standard error of S(t).
    pub se: Vec<f64>,
    /// 95% confidence limits on the log-survival scale.
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub n_risk: Vec<usize>,
    pub n_events: Vec<usize>,
}

impl KmCurve {
    /// Survival probability at time `t` (right-continuous step function).
    pub fn survival_at(&self, t: f64) -> f64 {
        let mut s = 1.0;
        for (time, surv) in self.times.iter().zip(&self.survival) {
            if *time <= t + 1e-12 {
                s = *surv;
            } else {
                break;
            }
        }
        s
    }
}

/// Product-limit estimate for one group (or the pooled sample when `group`
/// is `None`).
pub fn kaplan_meier(data: &SurvivalDataset, group: Option<Arm>) -> Result<KmCurve> {
    let rows: Vec<&SurvRow> = data
        .rows()
        .iter()
        .filter(|r| group.map_or(true, |g| r.arm == g))
        .collect();
    if rows.is_empty() {
        return Err(Error::Data("empty group for Kaplan-Meier".into()));
    }
    // rows are sorted by time already (dataset invariant)
    let n_total = rows.len();
    let mut times = Vec::new();
    let mut survival = Vec::new();
    let mut se = Vec::new();
    let mut ci_lower = Vec::new();
    let mut ci_upper = Vec::new();
    let mut n_risk_v = Vec::new();
    let mut n_events_v = Vec::new();

    let mut s = 1.0;
    let mut green = 0.0; // sum d / (n (n - d))
    let mut i = 0usize;
    let mut removed = 0usize;
    while i < rows.len() {
        let t = rows[i].time;
        let mut d = 0usize;
        let mut c = 0usize;
        let mut j = i;
        while j < rows.len() && (rows[j].time - t).abs() < 1e-12 {
            if rows[j].event {
                d += 1;
            } else {
                c += 1;
            }
            j += 1;
        }
        let at_risk = n_total - removed;
        if d > 0 {
            s *= 1.0 - d as f64 / at_risk as f64;
            if at_risk > d {
                green += d as f64 / (at_risk as f64 * (at_risk - d) as f64);
            } else {
                green = f64::INFINITY;
            }
            let variance = s * s * green;
            times.push(t);
            survival.push(s);
            se.push(if variance.is_finite() {
                variance.sqrt()
            } else {
                0.0
            });
            if s > 0.0 && green.is_finite() {
                let se_log = green.sqrt();
                ci_lower.push((s.ln() - 1.96 * se_log).exp().min(1.0));
                ci_upper.push((s.ln() + 1.96 * se_log).exp().min(1.0));
            } else {
                ci_lower.push(0.0);
                ci_upper.push(if s > 0.0 { 1.0 } else { 0.0 });
            }
            n_risk_v.push(at_risk);
            n_events_v.push(d);
        }
        removed += d + c;
        i = j;
    }

    Ok(KmCurve {
        times,
        survival,
        se,
        ci_lower,
        ci_upper,
        n_risk: n_risk_v,
        n_events: n_events_v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn row(subject: u32, time: f64, event: bool) -> SurvRow {
        SurvRow {
            subject,
            arm: Arm::Placebo,
            time,
            event,
            age: 74.0,
            apoe4: 0.0,
        }
    }

    #[test]
    fn no_events_flat_curve() {
        let data =
            SurvivalDataset::new(vec![row(1, 2.0, false), row(2, 3.0, false)]).unwrap();
        let km = kaplan_meier(&data, None).unwrap();
        assert!(km.times.is_empty());
        assert_abs_diff_eq!(km.survival_at(5.0), 1.0);
    }

    #[test]
    fn hand_product_limit() {
        // times {1 event, 2 censor, 3 event}: S = 2/3 on [1,3), 0 at 3
        let data = SurvivalDataset::new(vec![
            row(1, 1.0, true),
            row(2, 2.0, false),
            row(3, 3.0, true),
        ])
        .unwrap();
        let km = kaplan_meier(&data, None).unwrap();
        assert_eq!(km.times, vec![1.0, 3.0]);
        assert_abs_diff_eq!(km.survival[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(km.survival[1], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(km.survival_at(2.5), 2.0 / 3.0, epsilon = 1e-15);
        // Greenwood at t=1: S^2 * d/(n(n-d)) = (2/3)^2 * 1/(3*2)
        assert_abs_diff_eq!(
            km.se[0],
            ((2.0f64 / 3.0).powi(2) / 6.0).sqrt(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn doubling_subjects_leaves_curve_unchanged() {
        let base = vec![
            row(1, 1.0, true),
            row(2, 2.0, false),
            row(3, 3.0, true),
            row(4, 4.0, false),
        ];
        let mut doubled = base.clone();
        for (i, r) in base.iter().enumerate() {
            let mut r2 = *r;
            r2.subject = 100 + i as u32;
            doubled.push(r2);
        }
        let km1 = kaplan_meier(&SurvivalDataset::new(base).unwrap(), None).unwrap();
        let km2 = kaplan_meier(&SurvivalDataset::new(doubled).unwrap(), None).unwrap();
        assert_eq!(km1.times, km2.times);
        for (a, b) in km1.survival.iter().zip(&km2.survival) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn tied_events_in_one_step() {
        let data = SurvivalDataset::new(vec![
            row(1, 1.0, true),
            row(2, 1.0, true),
            row(3, 2.0, false),
            row(4, 3.0, false),
        ])
        .unwrap();
        let km = kaplan_meier(&data, None).unwrap();
        assert_eq!(km.times, vec![1.0]);
        assert_abs_diff_eq!(km.survival[0], 0.5, epsilon = 1e-15);
        assert_eq!(km.n_events[0], 2);
        assert_eq!(km.n_risk[0], 4);
    }

    #[test]
    fn monotone_nonincreasing() {
        let mut rows = Vec::new();
        for i in 0..40u32 {
            rows.push(row(i, 0.5 + (i % 9) as f64, i % 3 != 0));
        }
        let km = kaplan_meier(&SurvivalDataset::new(rows).unwrap(), None).unwrap();
        for w in km.survival.windows(2) {
            assert!(w[1] <= w[0] + 1e-15);
        }
    }
}
