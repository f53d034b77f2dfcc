//! Raw-score to Z-scale conversion and the PACC composite.
//!
//! Raw cognitive scores are mapped to an approximate Z-score through a
//! weighted empirical CDF followed by the inverse Gaussian quantile function.
//! References are oriented so that ascending stored values mean increasing
//! impairment; higher Z therefore means more impaired. The PACC composite
//! standardizes four components against baseline statistics and averages
//! them, negated so that cognitive decline plots downward.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// The seven cognitive outcomes carried through the simulation, in the fixed
/// index order used by trajectories and random-effect vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    AdasDwr,
    LogMem,
    TrailsB,
    Mmse,
    Fluency,
    Cdrsb,
    Faq,
}

pub const N_OUTCOMES: usize = 7;

impl Outcome {
    pub const ALL: [Outcome; N_OUTCOMES] = [
        Outcome::AdasDwr,
        Outcome::LogMem,
        Outcome::TrailsB,
        Outcome::Mmse,
        Outcome::Fluency,
        Outcome::Cdrsb,
        Outcome::Faq,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&o| o == self).unwrap()
    }

    pub fn label(self) -> &'static str {
        match self {
            Outcome::AdasDwr => "adas_dwr",
            Outcome::LogMem => "log_mem",
            Outcome::TrailsB => "trails_b",
            Outcome::Mmse => "mmse",
            Outcome::Fluency => "fluency",
            Outcome::Cdrsb => "cdrsb",
            Outcome::Faq => "faq",
        }
    }
}

/// The four PACC components, as indices into the outcome vector.
pub const PACC_COMPONENTS: [Outcome; 4] = [
    Outcome::AdasDwr,
    Outcome::LogMem,
    Outcome::TrailsB,
    Outcome::Mmse,
];

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// Standard normal quantile function.
pub fn norm_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Weighted empirical reference distribution for one outcome.
///
/// Values are stored sorted ascending on an impairment scale (ascending =
/// more impaired); weights are normalized to sum to one on construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceDistribution {
    pub outcome: Outcome,
    sorted_values: Vec<f64>,
    weights: Vec<f64>,
    pub integer_valued: bool,
}

impl ReferenceDistribution {
    /// Build a reference from raw observations with per-observation weights.
    /// Weights default to equal when `None`; category-count users can pass
    /// inverse-proportional weights here.
    pub fn new(
        outcome: Outcome,
        values: Vec<f64>,
        weights: Option<Vec<f64>>,
        integer_valued: bool,
    ) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config(format!(
                "empty reference distribution for {}",
                outcome.label()
            )));
        }
        let n = values.len();
        let weights = match weights {
            Some(w) => {
                if w.len() != n {
                    return Err(Error::Config("weights/values length mismatch".into()));
                }
                if w.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                    return Err(Error::Config("weights must be positive and finite".into()));
                }
                w
            }
            None => vec![1.0; n],
        };
        let mut pairs: Vec<(f64, f64)> = values.into_iter().zip(weights).collect();
        if pairs.iter().any(|(v, _)| !v.is_finite()) {
            return Err(Error::Config("reference values must be finite".into()));
        }
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let total: f64 = pairs.iter().map(|(_, w)| w).sum();
        let (sorted_values, weights): (Vec<f64>, Vec<f64>) =
            pairs.into_iter().map(|(v, w)| (v, w / total)).unzip();
        Ok(Self {
            outcome,
            sorted_values,
            weights,
            integer_valued,
        })
    }

    pub fn len(&self) -> usize {
        self.sorted_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted_values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.sorted_values
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weighted mid-rank quantile of `value`: cumulative weight of strictly
    /// smaller observations plus half the weight tied at `value`.
    fn mid_rank(&self, value: f64) -> f64 {
        let mut below = 0.0;
        let mut at = 0.0;
        for (&v, &w) in self.sorted_values.iter().zip(&self.weights) {
            if v < value {
                below += w;
            } else if v == value {
                at += w;
            } else {
                break;
            }
        }
        below + 0.5 * at
    }

    /// Map a raw score to an approximate Z-score via the weighted ECDF and
    /// the inverse Gaussian quantile function. The quantile is clamped to
    /// `[eps, 1 - eps]` with `eps = 1/(2n)` so the result is always finite.
    pub fn weighted_ecdf_z(&self, value: f64) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::Config("empty reference distribution".into()));
        }
        let eps = 1.0 / (2.0 * self.len() as f64);
        let q = self.mid_rank(value).clamp(eps, 1.0 - eps);
        Ok(norm_quantile(q))
    }

    /// Inverse of [`Self::weighted_ecdf_z`]: quantile lookup into the
    /// reference, clamped at the distribution extremes. Integer-valued
    /// outcomes are rounded to the nearest attainable value.
    pub fn z_to_raw(&self, z: f64) -> f64 {
        let q = norm_cdf(z);
        let mut cum = 0.0;
        let mut out = *self.sorted_values.last().unwrap();
        for (&v, &w) in self.sorted_values.iter().zip(&self.weights) {
            cum += w;
            if cum >= q - 1e-15 {
                out = v;
                break;
            }
        }
        if self.integer_valued {
            out.round()
        } else {
            out
        }
    }

    /// Weighted median (the z = 0 preimage).
    pub fn median(&self) -> f64 {
        self.z_to_raw(0.0)
    }
}

/// Baseline mean/SD and impairment orientation for one PACC component.
/// `orientation` is +1 when a higher score means more impairment, -1 when a
/// higher score means better cognition.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BaselineStats {
    pub mean: f64,
    pub sd: f64,
    pub orientation: f64,
}

impl BaselineStats {
    pub fn new(mean: f64, sd: f64, orientation: f64) -> Result<Self> {
        if !(sd > 0.0) {
            return Err(Error::Config(format!("baseline sd must be > 0, got {sd}")));
        }
        if orientation != 1.0 && orientation != -1.0 {
            return Err(Error::Config("orientation must be +1 or -1".into()));
        }
        Ok(Self {
            mean,
            sd,
            orientation,
        })
    }

    /// Impairment-positive standardized score.
    pub fn standardize(&self, x: f64) -> f64 {
        self.orientation * (x - self.mean) / self.sd
    }
}

/// PACC composite: each available component is standardized against its
/// baseline statistics, oriented impairment-positive, averaged, and negated
/// so that lower PACC means worse cognition. Returns `None` when all four
/// components are missing.
pub fn compute_pacc(components: &[Option<f64>; 4], stats: &[BaselineStats; 4]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (c, s) in components.iter().zip(stats) {
        if let Some(x) = c {
            sum += s.standardize(*x);
            n += 1;
        }
    }
    if n == 0 {
        None
    } else {
        Some(-sum / n as f64)
    }
}

/// On-disk schema for reference distributions and baseline statistics
/// (TOML; see `configs/references.toml` for the shipped synthetic set).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformConfig {
    #[serde(default)]
    pub reference: Vec<ReferenceEntry>,
    #[serde(default)]
    pub baseline: Vec<BaselineEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceEntry {
    pub outcome: Outcome,
    pub values: Vec<f64>,
    /// Per-observation weights; equal weights when omitted.
    pub weights: Option<Vec<f64>>,
    #[serde(default)]
    pub integer_valued: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineEntry {
    pub outcome: Outcome,
    pub mean: f64,
    pub sd: f64,
    pub orientation: f64,
}

impl TransformConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(format!("transform config: {e}")))
    }

    pub fn references(&self) -> Result<Vec<ReferenceDistribution>> {
        self.reference
            .iter()
            .map(|e| {
                ReferenceDistribution::new(
                    e.outcome,
                    e.values.clone(),
                    e.weights.clone(),
                    e.integer_valued,
                )
            })
            .collect()
    }

    pub fn baseline_stats(&self) -> Result<Vec<(Outcome, BaselineStats)>> {
        self.baseline
            .iter()
            .map(|e| Ok((e.outcome, BaselineStats::new(e.mean, e.sd, e.orientation)?)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_ref() -> ReferenceDistribution {
        ReferenceDistribution::new(Outcome::AdasDwr, vec![1.0, 2.0, 3.0], None, false).unwrap()
    }

    #[test]
    fn ecdf_z_examples() {
        let r = small_ref();
        // mid-rank (r - 0.5)/n convention: value 3 -> 5/6, value 1 -> 1/6
        assert_abs_diff_eq!(
            r.weighted_ecdf_z(3.0).unwrap(),
            norm_quantile(5.0 / 6.0),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(r.weighted_ecdf_z(3.0).unwrap(), 0.9674, epsilon = 5e-4);
        assert_abs_diff_eq!(r.weighted_ecdf_z(1.0).unwrap(), -0.9674, epsilon = 5e-4);
        // weighted median maps to exactly 0
        assert_abs_diff_eq!(r.weighted_ecdf_z(2.0).unwrap(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn ecdf_z_empty_reference_rejected() {
        assert!(ReferenceDistribution::new(Outcome::Mmse, vec![], None, true).is_err());
    }

    #[test]
    fn z_to_raw_examples() {
        let r = small_ref();
        assert_eq!(r.z_to_raw(0.0), 2.0); // weighted median
        assert_eq!(r.z_to_raw(10.0), 3.0); // clamps at the maximum
        assert_eq!(r.z_to_raw(-10.0), 1.0);
    }

    #[test]
    fn round_trip_on_reference_values() {
        let vals: Vec<f64> = vec![0.0, 1.0, 1.0, 2.0, 5.0, 7.0, 11.0];
        let r = ReferenceDistribution::new(Outcome::Faq, vals.clone(), None, true).unwrap();
        for v in vals {
            let z = r.weighted_ecdf_z(v).unwrap();
            assert_eq!(r.z_to_raw(z), v);
        }
    }

    #[test]
    fn weighted_quantiles_respect_weights() {
        // weight mass 0.9 on value 10 pushes the median there
        let r = ReferenceDistribution::new(
            Outcome::Cdrsb,
            vec![1.0, 10.0],
            Some(vec![0.1, 0.9]),
            false,
        )
        .unwrap();
        assert_eq!(r.median(), 10.0);
        // mid-rank of 1.0 = 0.05, of 10.0 = 0.55
        assert_abs_diff_eq!(
            r.weighted_ecdf_z(1.0).unwrap(),
            norm_quantile(0.25),
            epsilon = 1e-12
        ); // clamped to eps = 1/4
        assert_abs_diff_eq!(
            r.weighted_ecdf_z(10.0).unwrap(),
            norm_quantile(0.55),
            epsilon = 1e-12
        );
    }

    #[test]
    fn gaussian_reference_is_approx_standardizing() {
        // Kolmogorov distance of transformed draws to N(0,1) < 0.05 at n = 10_000.
        let mut rng = crate::rng::stream(7, crate::rng::Domain::Calibration, &[0]);
        let n = 10_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * 3.0 + 12.0)
            .collect();
        let r = ReferenceDistribution::new(Outcome::LogMem, draws.clone(), None, false).unwrap();
        let mut zs: Vec<f64> = draws
            .iter()
            .map(|&v| r.weighted_ecdf_z(v).unwrap())
            .collect();
        zs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ks: f64 = 0.0;
        for (i, z) in zs.iter().enumerate() {
            let emp_hi = (i + 1) as f64 / n as f64;
            let emp_lo = i as f64 / n as f64;
            let th = norm_cdf(*z);
            ks = ks.max((emp_hi - th).abs()).max((th - emp_lo).abs());
        }
        assert!(ks < 0.05, "KS distance {ks} too large");
    }

    #[test]
    fn pacc_examples() {
        let stats = [
            BaselineStats::new(5.0, 2.0, 1.0).unwrap(),
            BaselineStats::new(13.0, 3.0, -1.0).unwrap(),
            BaselineStats::new(4.5, 0.4, 1.0).unwrap(),
            BaselineStats::new(29.0, 1.0, -1.0).unwrap(),
        ];
        // components at baseline means -> 0
        let at_mean = [Some(5.0), Some(13.0), Some(4.5), Some(29.0)];
        assert_abs_diff_eq!(compute_pacc(&at_mean, &stats).unwrap(), 0.0, epsilon = 1e-12);
        // 1 SD better than baseline on every component (after orientation) -> +1
        let better = [Some(3.0), Some(16.0), Some(4.1), Some(30.0)];
        assert_abs_diff_eq!(compute_pacc(&better, &stats).unwrap(), 1.0, epsilon = 1e-12);
        // single available component at +1 impairment -> -1
        let one = [Some(7.0), None, None, None];
        assert_abs_diff_eq!(compute_pacc(&one, &stats).unwrap(), -1.0, epsilon = 1e-12);
        // all missing -> missing
        assert!(compute_pacc(&[None, None, None, None], &stats).is_none());
    }

    #[test]
    fn toml_round_trip() {
        let text = r#"
            [[reference]]
            outcome = "mmse"
            values = [30.0, 29.0, 28.0, 26.0]
            integer_valued = true

            [[baseline]]
            outcome = "mmse"
            mean = 29.1
            sd = 1.07
            orientation = -1.0
        "#;
        let cfg = TransformConfig::from_toml(text).unwrap();
        let refs = cfg.references().unwrap();
        assert_eq!(refs.len(), 1);
        assert_eq!(refs[0].len(), 4);
        assert!(refs[0].integer_valued);
        let stats = cfg.baseline_stats().unwrap();
        assert_eq!(stats[0].0, Outcome::Mmse);
    }

    proptest! {
        #[test]
        fn ecdf_z_monotone(mut vals in proptest::collection::vec(-50.0f64..50.0, 3..40),
                           probes in proptest::collection::vec(-60.0f64..60.0, 2..20)) {
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let r = ReferenceDistribution::new(Outcome::Fluency, vals, None, false).unwrap();
            let mut sorted = probes.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let zs: Vec<f64> = sorted.iter().map(|&p| r.weighted_ecdf_z(p).unwrap()).collect();
            for w in zs.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-12);
            }
        }

        #[test]
        fn round_trip_identity(vals in proptest::collection::vec(-20.0f64..20.0, 1..30)) {
            let r = ReferenceDistribution::new(Outcome::TrailsB, vals.clone(), None, false).unwrap();
            for v in vals {
                let z = r.weighted_ecdf_z(v).unwrap();
                prop_assert_eq!(r.z_to_raw(z), v);
            }
        }

        #[test]
        fn pacc_order_invariant_and_linear(z in -3.0f64..3.0) {
            let s = BaselineStats::new(0.0, 1.0, 1.0).unwrap();
            let stats = [s, s, s, s];
            let a = compute_pacc(&[Some(z), Some(0.5), None, Some(-0.25)], &stats).unwrap();
            let b = compute_pacc(&[Some(-0.25), Some(0.5), Some(z), None], &stats).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            // linear in each component with coefficient -1/(number available)
            let base = compute_pacc(&[Some(0.0), Some(0.5), None, Some(-0.25)], &stats).unwrap();
            prop_assert!((a - (base - z / 3.0)).abs() < 1e-12);
        }
    }
}
