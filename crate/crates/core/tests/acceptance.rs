//! Acceptance suite: one pass/fail line per criterion.
//!
//! The Monte Carlo criteria (2-5) share one scenario run (effects
//! {0, 0.2, 0.3, 0.4}, n = 1000, R = 300 by default; override with
//! PADSIM_ACCEPT_REPS). Criterion 2 additionally has a full R = 1000 variant
//! behind `--ignored` (`type_i_error_full_r1000`). Criteria 1 and 6-8 run as
//! separate cheap tests.

use padsim_core::datagen::Arm;
use padsim_core::estimators::*;
use padsim_core::harness::*;
use padsim_core::inference::*;
use std::time::Instant;

fn report(criterion: &str, pass: bool, detail: &str) -> Option<String> {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("{tag} {criterion}: {detail}");
    if pass {
        None
    } else {
        Some(format!("{criterion}: {detail}"))
    }
}

// ---------------------------------------------------------------------------
// Criterion 1: estimator oracles
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_estimator_oracles() {
    let t0 = Instant::now();
    let mut failures: Vec<String> = Vec::new();

    // GLS vs hand normal equations (1e-10)
    {
        use nalgebra::{DMatrix, DVector};
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0]);
        let y = DVector::from_row_slice(&[0.1, 1.3, 2.7]);
        let v = DMatrix::from_partial_diagonal(3, 3, &[1.0, 2.0, 4.0]);
        let (beta, cov) = gls_estimate(&x, &y, &v).unwrap();
        let w = DMatrix::from_partial_diagonal(3, 3, &[1.0, 0.5, 0.25]);
        let a = x.transpose() * &w * &x;
        let ainv = a.try_inverse().unwrap();
        let ref_beta = &ainv * (x.transpose() * &w * &y);
        let err = (beta - ref_beta).abs().max().max((cov - ainv).abs().max());
        failures.extend(report(
            "criterion 1a (GLS vs normal equations)",
            err < 1e-10,
            &format!("max deviation {err:.2e} (tol 1e-10)"),
        ));
    }

    // Cox 4-subject hand-maximized partial likelihood (1e-6)
    {
        let row = |subject, arm, time, event| SurvRow {
            subject,
            arm,
            time,
            event,
            age: 74.0,
            apoe4: 0.0,
        };
        let data = SurvivalDataset::new(vec![
            row(1, Arm::Treatment, 1.0, true),
            row(2, Arm::Placebo, 2.0, true),
            row(3, Arm::Treatment, 3.0, false),
            row(4, Arm::Placebo, 4.0, false),
        ])
        .unwrap();
        let fit = fit_coxph(&data).unwrap();
        // score equation: u/(u+1) + u/(u+2) = 1 solves to u = sqrt(2)
        let err = (fit.coef_named("treatment").unwrap() - 0.5 * 2.0f64.ln()).abs();
        failures.extend(report(
            "criterion 1b (Cox hand oracle)",
            fit.converged && err < 1e-6,
            &format!("|beta - ln sqrt(2)| = {err:.2e} (tol 1e-6)"),
        ));
    }

    // Kaplan-Meier vs hand product-limit (exact)
    {
        let row = |subject, time, event| SurvRow {
            subject,
            arm: Arm::Placebo,
            time,
            event,
            age: 74.0,
            apoe4: 0.0,
        };
        let data = SurvivalDataset::new(vec![
            row(1, 1.0, true),
            row(2, 2.0, false),
            row(3, 3.0, true),
        ])
        .unwrap();
        let km = kaplan_meier(&data, None).unwrap();
        let exact = km.times == vec![1.0, 3.0]
            && (km.survival[0] - 2.0 / 3.0).abs() < 1e-15
            && km.survival[1].abs() < 1e-15;
        failures.extend(report(
            "criterion 1c (KM hand product-limit)",
            exact,
            &format!("S = {:?} at {:?}", km.survival, km.times),
        ));
    }

    // area-between-curves vs quadrature (1e-10)
    {
        use nalgebra::{DMatrix, DVector};
        let simpson = |f: &dyn Fn(f64) -> f64, a: f64, b: f64| -> f64 {
            let n = 1 << 14;
            let h = (b - a) / n as f64;
            let mut s = f(a) + f(b);
            for i in 1..n {
                s += f(a + i as f64 * h) * if i % 2 == 0 { 2.0 } else { 4.0 };
            }
            s * h / 3.0
        };
        let mut worst: f64 = 0.0;
        for &(b2, b4, t0, tt) in &[
            (0.1, 0.0, 0.0, 4.5),
            (0.0, 0.03, 0.0, 3.0),
            (-0.08, 0.013, 0.25, 4.5),
            (0.31, -0.044, 1.0, 8.0),
        ] {
            let fit = FitResult {
                model: "clda2".into(),
                coef_names: vec!["t_active".into(), "t2_active".into()],
                coef: DVector::from_row_slice(&[b2, b4]),
                cov: DMatrix::from_partial_diagonal(2, 2, &[1e-4, 1e-6]),
                variance_components: vec![],
                loglik: 0.0,
                converged: true,
                iterations: 1,
                grad_norm: 0.0,
            };
            let got = area_between_curves(&fit, t0, tt).unwrap().estimate;
            let want = simpson(&|t| b2 * t + b4 * t * t, t0, tt);
            worst = worst.max((got - want).abs());
        }
        failures.extend(report(
            "criterion 1d (area vs quadrature)",
            worst < 1e-10,
            &format!("max |closed form - quadrature| = {worst:.2e} (tol 1e-10)"),
        ));
    }

    // cLDA recovery of constructed noise-free polynomials (1e-6)
    {
        let grid: Vec<f64> = (0..=9).map(|i| i as f64 * 0.5).collect();
        let (b0, b1, b2, b3, b4) = (0.4, -0.15, 0.05, -0.02, 0.012);
        let mut rows = Vec::new();
        let mut subjects = Vec::new();
        for i in 0..20u32 {
            for (slot, arm) in [Arm::Treatment, Arm::Placebo].into_iter().enumerate() {
                let id = 2 * i + slot as u32;
                subjects.push(SubjectInfo {
                    id,
                    arm,
                    age: 66.0 + (i % 12) as f64,
                    apoe4: (i % 2) as f64,
                    dropout: None,
                });
                let active = f64::from(arm == Arm::Treatment);
                for &t in &grid {
                    rows.push(LongRow {
                        subject: id,
                        time: t,
                        pacc: b0 + b1 * t + b2 * t * active + b3 * t * t + b4 * t * t * active,
                    });
                }
            }
        }
        let data = LongitudinalDataset::new(rows, subjects, grid, 4.5).unwrap();
        let fit = fit_clda(&data, 2).unwrap();
        let err = [
            (fit.coef_named("t").unwrap() - b1).abs(),
            (fit.coef_named("t_active").unwrap() - b2).abs(),
            (fit.coef_named("t2").unwrap() - b3).abs(),
            (fit.coef_named("t2_active").unwrap() - b4).abs(),
        ]
        .into_iter()
        .fold(0.0f64, f64::max);
        failures.extend(report(
            "criterion 1e (cLDA polynomial recovery)",
            err < 1e-6,
            &format!("max coefficient error {err:.2e} (tol 1e-6)"),
        ));
    }

    let elapsed = t0.elapsed().as_secs_f64();
    failures.extend(report(
        "criterion 1 runtime",
        elapsed < 5.0,
        &format!("{elapsed:.2}s (< 5s)"),
    ));
    assert!(failures.is_empty(), "failed: {failures:?}");
}

// ---------------------------------------------------------------------------
// Criteria 2-5: shared Monte Carlo run
// ---------------------------------------------------------------------------

fn accept_reps() -> usize {
    std::env::var("PADSIM_ACCEPT_REPS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(300)
}

fn shared_scenario(reps: usize) -> (ScenarioConfig, ScenarioOutputs, f64) {
    let mut config = ScenarioConfig::default();
    config.replicates = reps;
    config.n_grid = vec![1000];
    config.effect_grid = vec![0.0, 0.2, 0.3, 0.4];
    let artifact = fit_forest_artifact(&config).expect("forest training");
    let t0 = Instant::now();
    let outputs = run_scenario(&config, &artifact).expect("scenario run");
    (config, outputs, t0.elapsed().as_secs_f64())
}

fn power_of(out: &ScenarioOutputs, effect: f64, model: &str, dataset: &str) -> Option<f64> {
    out.summary
        .power
        .iter()
        .find(|c| c.effect == effect && c.model == model && c.dataset == dataset)
        .map(|c| c.rejection_rate)
}

fn bias_of<'a>(
    out: &'a ScenarioOutputs,
    effect: f64,
    model: &str,
) -> Option<&'a padsim_core::harness::BiasCell> {
    out.summary
        .bias
        .iter()
        .find(|c| c.effect == effect && c.model == model)
}

#[test]
fn criteria_2_to_5_monte_carlo() {
    let reps = accept_reps();
    let (_config, out, elapsed) = shared_scenario(reps);
    let mut failures: Vec<String> = Vec::new();
    println!(
        "shared scenario: {reps} replicates x 4 effects in {elapsed:.0}s \
         (~{:.0}s per single-effect cell)",
        elapsed / 4.0
    );

    // Criterion 2 (smoke bands at R = 300: [0.02, 0.09] for cLDA1/cLDA2/Cox,
    // MMRM possibly conservative, checked as <= 0.09)
    for (model, lo, hi) in [
        ("clda1", 0.02, 0.09),
        ("clda2", 0.02, 0.09),
        ("coxph", 0.02, 0.09),
        ("mmrm", 0.0, 0.09),
    ] {
        for dataset in ["observed", "complete"] {
            let rate = power_of(&out, 0.0, model, dataset).unwrap_or(f64::NAN);
            let pass = rate >= lo && rate <= hi;
            failures.extend(report(
                "criterion 2 (Type I error, smoke)",
                pass,
                &format!("{model}/{dataset} rejection rate {rate:.3} in [{lo}, {hi}]"),
            ));
        }
    }
    failures.extend(report(
        "criterion 2 runtime (smoke cell)",
        elapsed / 4.0 < 600.0,
        &format!("{:.0}s per cell (< 600s)", elapsed / 4.0),
    ));

    // Criterion 3: power ordering at effect 0.3 (observed data)
    {
        let cox = power_of(&out, 0.3, "coxph", "observed").unwrap_or(f64::NAN);
        let mmrm = power_of(&out, 0.3, "mmrm", "observed").unwrap_or(f64::NAN);
        let clda1 = power_of(&out, 0.3, "clda1", "observed").unwrap_or(f64::NAN);
        let clda2 = power_of(&out, 0.3, "clda2", "observed").unwrap_or(f64::NAN);
        let best = mmrm.max(clda1).max(clda2);
        let pass = cox < mmrm
            && cox < clda1
            && cox < clda2
            && best - cox >= 0.15
            && best >= 1.5 * cox;
        failures.extend(report(
            "criterion 3 (power ordering at 30%)",
            pass,
            &format!(
                "cox {cox:.3} vs mmrm {mmrm:.3}, clda1 {clda1:.3}, clda2 {clda2:.3}; \
                 best-cox = {:.3} (>= 0.15), best/cox = {:.2} (>= 1.5)",
                best - cox,
                best / cox
            ),
        ));
    }

    // Criterion 4: bias direction and power inflation under missingness
    for model in ["mmrm", "clda1", "clda2"] {
        for effect in [0.2, 0.3, 0.4] {
            let b = bias_of(&out, effect, model);
            let median = b.map(|c| c.bias_median).unwrap_or(f64::NAN);
            failures.extend(report(
                "criterion 4a (median bias > 0)",
                median > 0.0,
                &format!("{model} at {effect}: median(d_obs - d_comp) = {median:+.4}"),
            ));
            let po = power_of(&out, effect, model, "observed").unwrap_or(f64::NAN);
            let pc = power_of(&out, effect, model, "complete").unwrap_or(f64::NAN);
            failures.extend(report(
                "criterion 4b (observed power exceeds complete)",
                po > pc,
                &format!("{model} at {effect}: observed {po:.3} vs complete {pc:.3}"),
            ));
        }
    }

    // Criterion 5: the mixture correction shrinks |median bias percent| at
    // every effect size, and overcorrects (adjusted median <= 0) in >= 2 of
    // 3 effect sizes per model
    for model in ["mmrm", "clda1", "clda2"] {
        let adjusted = format!("{model}_mehrotra");
        let mut n_overcorrect = 0;
        for effect in [0.2, 0.3, 0.4] {
            let unadj = bias_of(&out, effect, model)
                .map(|c| c.bias_pct_median)
                .unwrap_or(f64::NAN);
            let adj = bias_of(&out, effect, &adjusted)
                .map(|c| c.bias_pct_median)
                .unwrap_or(f64::NAN);
            failures.extend(report(
                "criterion 5a (|adjusted| < |unadjusted| bias%)",
                adj.abs() < unadj.abs(),
                &format!(
                    "{model} at {effect}: adjusted {adj:+.1}% vs unadjusted {unadj:+.1}%"
                ),
            ));
            if adj <= 0.0 {
                n_overcorrect += 1;
            }
        }
        failures.extend(report(
            "criterion 5b (overcorrection in >= 2 of 3 effects)",
            n_overcorrect >= 2,
            &format!("{model}: adjusted median bias% <= 0 at {n_overcorrect}/3 effects"),
        ));
    }

    assert!(
        failures.is_empty(),
        "{} criterion checks failed:\n{}",
        failures.len(),
        failures.join("\n")
    );
}

/// Full Type I error variant: R = 1000 at effect 0, bands [0.033, 0.069] for
/// cLDA1/cLDA2/Cox and <= 0.07 for MMRM. Runtime target < 30 min on a
/// desktop-class machine.
#[test]
#[ignore]
fn type_i_error_full_r1000() {
    let mut config = ScenarioConfig::default();
    config.replicates = 1000;
    config.n_grid = vec![1000];
    config.effect_grid = vec![0.0];
    let artifact = fit_forest_artifact(&config).unwrap();
    let t0 = Instant::now();
    let out = run_scenario(&config, &artifact).unwrap();
    let elapsed = t0.elapsed().as_secs_f64();
    let mut failures: Vec<String> = Vec::new();
    for (model, lo, hi) in [
        ("clda1", 0.033, 0.069),
        ("clda2", 0.033, 0.069),
        ("coxph", 0.033, 0.069),
        ("mmrm", 0.0, 0.07),
    ] {
        for dataset in ["observed", "complete"] {
            let rate = out
                .summary
                .power
                .iter()
                .find(|c| c.effect == 0.0 && c.model == model && c.dataset == dataset)
                .map(|c| c.rejection_rate)
                .unwrap_or(f64::NAN);
            let pass = rate >= lo && rate <= hi;
            failures.extend(report(
                "criterion 2 (Type I error, R=1000)",
                pass,
                &format!("{model}/{dataset} rejection rate {rate:.4} in [{lo}, {hi}]"),
            ));
        }
    }
    println!("R=1000 Type I cell in {elapsed:.0}s");
    assert!(failures.is_empty(), "failed:\n{}", failures.join("\n"));
}

// ---------------------------------------------------------------------------
// Criterion 6: labeler calibration and the placebo KM curve
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_calibration() {
    let config = ScenarioConfig::default();
    let theta = calibrate_labeler(
        &config.params,
        &config.design,
        &config.labeler,
        &config.calibration,
        config.master_seed,
    )
    .unwrap();
    let labeler = padsim_core::diagnosis::LabelerSpec {
        theta,
        ..config.labeler
    };
    let mut failures: Vec<String> = Vec::new();
    // fresh-stream (out-of-sample) progression fraction
    let frac = placebo_progression_fraction(
        &config.params,
        &config.design,
        &labeler,
        20_000,
        config.master_seed,
        11,
    )
    .unwrap();
    failures.extend(report(
        "criterion 6 (calibration)",
        (frac - 0.24).abs() <= 0.01,
        &format!("fresh-stream placebo 8y progression fraction {frac:.4} = 0.24 +/- 0.01"),
    ));
    // Kaplan-Meier of a large simulated placebo group
    let surv = labeler_survival_dataset(
        &config.params,
        &config.design,
        &labeler,
        20_000,
        config.master_seed,
        12,
    )
    .unwrap();
    let km = kaplan_meier(&surv, None).unwrap();
    let monotone = km.survival.windows(2).all(|w| w[1] <= w[0] + 1e-12);
    let s8 = km.survival_at(8.0);
    failures.extend(report(
        "criterion 6 (KM curve)",
        monotone && (s8 - 0.76).abs() <= 0.015,
        &format!("monotone nonincreasing = {monotone}, S(8y) = {s8:.4} (~0.76)"),
    ));
    assert!(failures.is_empty(), "failed:\n{}", failures.join("\n"));
}

// ---------------------------------------------------------------------------
// Criterion 7: forest quality against the synthetic labeler
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_forest_oob() {
    let config = ScenarioConfig::default();
    let artifact = fit_forest_artifact(&config).unwrap();
    let oob = artifact.forest.oob_error;
    let pass = artifact.n_training_rows == 2000 && oob <= 0.12;
    let failure = report(
        "criterion 7 (forest OOB error)",
        pass,
        &format!(
            "OOB error {oob:.4} <= 0.12 on a {}-row corpus (500 trees, mtry 3)",
            artifact.n_training_rows
        ),
    );
    assert!(failure.is_none(), "{failure:?}");
}

// ---------------------------------------------------------------------------
// Criterion 8: byte-identical outputs under different parallelism
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_determinism() {
    let mut config = ScenarioConfig::default();
    config.replicates = 4;
    config.n_grid = vec![200];
    config.effect_grid = vec![0.0, 0.3];
    config.calibration.sample_size = 3000;
    config.forest.corpus_rows = 600;
    config.forest.config.n_trees = 80;
    let artifact = fit_forest_artifact(&config).unwrap();

    let run_with_threads = |threads: usize| -> (String, String, String) {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| {
            let out = run_scenario(&config, &artifact).unwrap();
            (
                replicates_csv(&config, &out.rows),
                power_csv(&config, &out.summary),
                bias_csv(&config, &out.summary),
            )
        })
    };
    let a = run_with_threads(1);
    let b = run_with_threads(2);
    let pass = a == b;
    let failure = report(
        "criterion 8 (determinism)",
        pass,
        &format!(
            "1-thread vs 2-thread summary CSVs byte-identical: {} ({} bytes)",
            pass,
            a.0.len() + a.1.len() + a.2.len()
        ),
    );
    assert!(failure.is_none(), "{failure:?}");
}
