//! Monte Carlo driver: scenario configuration, labeler calibration, forest
//! training corpus, per-replicate pipeline, and summary tables.
//!
//! Replicates execute in parallel; every random draw comes from a stream
//! keyed by `(master seed, effect, n, replicate, subject)`, and results merge
//! in replicate order, so outputs are byte-identical under any thread count.

use crate::datagen::{
    draw_noise, draw_subject, enrollment_and_followup, fill_trajectory, Arm, GenerativeParams,
    PreparedParams, SlopeSchedule, SubjectRecord, TrialDesign,
};
use crate::diagnosis::{
    progression_time, synthetic_labeler, train_forest, Diagnosis, Forest, ForestArtifact,
    ForestConfig, LabelerSpec, TrainingRow, FOREST_ARTIFACT_VERSION,
};
use crate::dropout::{
    apply_counterfactual, assign_dropout, censor, observed_follow_up, DropoutCause, DropoutSpec,
};
use crate::error::{Error, Result};
use crate::estimators::{
    fit_clda, fit_coxph, fit_mmrm, kaplan_meier, Discontinuation, DiscontinuationReason,
    LongRow, LongitudinalDataset, SubjectInfo, SurvRow, SurvivalDataset,
};
use crate::inference::{
    area_between_curves, final_visit_contrast, hazard_contrast, mehrotra_adjust, BaseModel,
    ContrastResult,
};
use crate::rng::{index_of_f64, stream, Domain};
use crate::transforms::{compute_pacc, BaselineStats, N_OUTCOMES, PACC_COMPONENTS};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Labeler threshold calibration settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CalibrationSettings {
    pub target: f64,
    pub tolerance: f64,
    pub sample_size: usize,
    pub max_steps: usize,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        Self {
            target: 0.24,
            tolerance: 0.01,
            sample_size: 20_000,
            max_steps: 60,
        }
    }
}

/// Forest training settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ForestSettings {
    #[serde(flatten)]
    pub config: ForestConfig,
    pub corpus_rows: usize,
}

impl Default for ForestSettings {
    fn default() -> Self {
        Self {
            config: ForestConfig::default(),
            corpus_rows: 2000,
        }
    }
}

/// Full scenario: design, generative truth, dropout, labeler, forest, grids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub master_seed: u64,
    pub replicates: usize,
    pub effect_grid: Vec<f64>,
    pub n_grid: Vec<usize>,
    pub alpha: f64,
    /// Path to a trained forest artifact; trained in-process when absent.
    #[serde(default)]
    pub forest_artifact: Option<std::path::PathBuf>,
    #[serde(default)]
    pub design: TrialDesign,
    #[serde(default)]
    pub params: GenerativeParams,
    /// Explicit dropout override; defaults per effect size when absent.
    #[serde(default)]
    pub dropout: Option<DropoutSpec>,
    #[serde(default)]
    pub labeler: LabelerSpec,
    #[serde(default)]
    pub calibration: CalibrationSettings,
    #[serde(default)]
    pub forest: ForestSettings,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            master_seed: 20260810,
            replicates: 1000,
            effect_grid: vec![0.0, 0.2, 0.3, 0.4],
            n_grid: vec![1000, 1500],
            alpha: 0.05,
            forest_artifact: None,
            design: TrialDesign::default(),
            params: GenerativeParams::default(),
            dropout: None,
            labeler: LabelerSpec::default(),
            calibration: CalibrationSettings::default(),
            forest: ForestSettings::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig =
            toml::from_str(text).map_err(|e| Error::Parse(format!("scenario config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario config serialize")
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("need at least one replicate".into()));
        }
        if !(0.0 < self.alpha && self.alpha < 1.0) {
            return Err(Error::Config("alpha must be in (0,1)".into()));
        }
        self.design.validate()?;
        if let Some(d) = &self.dropout {
            d.validate()?;
        }
        Ok(())
    }

    /// Short hash of the canonical serialized config, stamped into outputs.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml().as_bytes());
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Simulate a placebo cohort followed over the full grid (no common-close
/// truncation, no dropout); used by calibration and corpus building.
pub fn simulate_placebo_cohort(
    params: &PreparedParams,
    design: &TrialDesign,
    n: usize,
    master: u64,
    domain_tag: u64,
) -> Vec<SubjectRecord> {
    (0..n)
        .map(|i| {
            let key = [domain_tag, i as u64];
            let mut srng = stream(master, Domain::Calibration, &key);
            let mut subj = draw_subject(params, design, i as u32, &mut srng);
            subj.arm = Arm::Placebo;
            subj.follow_up_limit = design.max_follow_up;
            let mut nrng = stream(master, Domain::Noise, &[u64::MAX - domain_tag, i as u64]);
            draw_noise(&mut subj, design, &mut nrng);
            fill_trajectory(&mut subj, params, design, SlopeSchedule::Constant(1.0));
            subj
        })
        .collect()
}

/// Placebo progression fraction by the end of follow-up at threshold `theta`,
/// given each subject's maximum labeler score.
fn progression_fraction(max_scores: &[f64], theta: f64) -> f64 {
    max_scores.iter().filter(|&&m| m >= theta).count() as f64 / max_scores.len() as f64
}

/// Bisection on the labeler threshold until the simulated placebo
/// progression fraction by the full follow-up is within tolerance of the
/// target. Deterministic given the master seed.
pub fn calibrate_labeler(
    params: &GenerativeParams,
    design: &TrialDesign,
    weights: &LabelerSpec,
    settings: &CalibrationSettings,
    master: u64,
) -> Result<f64> {
    let prepared = params.prepare()?;
    let cohort = simulate_placebo_cohort(&prepared, design, settings.sample_size, master, 1);
    let max_scores: Vec<f64> = cohort
        .iter()
        .map(|s| {
            s.complete_trajectory
                .iter()
                .map(|z| weights.score(z))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let mut lo = max_scores.iter().copied().fold(f64::INFINITY, f64::min) - 1.0;
    let mut hi = max_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1.0;
    // fraction is 1 at lo, 0 at hi, monotone nonincreasing in theta
    for _ in 0..settings.max_steps {
        let mid = 0.5 * (lo + hi);
        let f = progression_fraction(&max_scores, mid);
        if (f - settings.target).abs() <= settings.tolerance {
            return Ok(mid);
        }
        if f > settings.target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Calibration(format!(
        "target {} unreachable in {} bisection steps",
        settings.target, settings.max_steps
    )))
}

/// Simulated placebo progression fraction by the full follow-up under a
/// calibrated labeler, on a fresh stream tag (out-of-sample check).
pub fn placebo_progression_fraction(
    params: &GenerativeParams,
    design: &TrialDesign,
    labeler: &LabelerSpec,
    n: usize,
    master: u64,
    tag: u64,
) -> Result<f64> {
    let prepared = params.prepare()?;
    let cohort = simulate_placebo_cohort(&prepared, design, n, master, tag);
    let progressed = cohort
        .iter()
        .filter(|s| {
            s.complete_trajectory
                .iter()
                .any(|z| synthetic_labeler(z, labeler) == Diagnosis::MciPlus)
        })
        .count();
    Ok(progressed as f64 / n as f64)
}

/// Time-to-progression dataset of a labeler-diagnosed placebo cohort
/// followed over the full grid (for Kaplan-Meier checks and plots).
pub fn labeler_survival_dataset(
    params: &GenerativeParams,
    design: &TrialDesign,
    labeler: &LabelerSpec,
    n: usize,
    master: u64,
    tag: u64,
) -> Result<SurvivalDataset> {
    let prepared = params.prepare()?;
    let cohort = simulate_placebo_cohort(&prepared, design, n, master, tag);
    let first_post = design.visit_grid.get(1).copied().unwrap_or(1.0);
    let mut rows = Vec::with_capacity(n);
    for s in &cohort {
        let seq: Vec<Diagnosis> = s
            .complete_trajectory
            .iter()
            .map(|z| synthetic_labeler(z, labeler))
            .collect();
        let (t, event) = progression_time(&seq, &design.visit_grid, s.follow_up_limit)?;
        rows.push(SurvRow {
            subject: s.id,
            arm: Arm::Placebo,
            time: t.max(first_post),
            event,
            age: s.age,
            apoe4: s.apoe4 as f64,
        });
    }
    SurvivalDataset::new(rows)
}

/// Build the forest training corpus: per-visit marker vectors plus age and
/// APOE4 from a mixed-population cohort, labeled by the synthetic labeler.
/// Rows are stride-sampled over (subject, visit) so every visit index is
/// represented.
pub fn build_training_corpus(
    params: &GenerativeParams,
    design: &TrialDesign,
    labeler: &LabelerSpec,
    n_rows: usize,
    master: u64,
) -> Result<Vec<TrainingRow>> {
    let prepared = params.prepare()?;
    let per_subject = design.visit_grid.len();
    let n_subjects = n_rows.div_ceil(per_subject) * 2;
    let cohort = simulate_placebo_cohort(&prepared, design, n_subjects, master, 2);
    let mut all: Vec<TrainingRow> = Vec::with_capacity(n_subjects * per_subject);
    for s in &cohort {
        for z in &s.complete_trajectory {
            let mut features = Vec::with_capacity(N_OUTCOMES + 2);
            features.extend_from_slice(z);
            features.push(s.age);
            features.push(s.apoe4 as f64);
            all.push(TrainingRow {
                features,
                label: synthetic_labeler(z, labeler),
            });
        }
    }
    if all.len() < n_rows {
        return Err(Error::Config("training corpus too small".into()));
    }
    let stride = all.len() as f64 / n_rows as f64;
    let rows: Vec<TrainingRow> = (0..n_rows)
        .map(|i| all[(i as f64 * stride) as usize].clone())
        .collect();
    Ok(rows)
}

/// Calibrate the labeler threshold and train the diagnosis forest against it.
pub fn fit_forest_artifact(config: &ScenarioConfig) -> Result<ForestArtifact> {
    let theta = calibrate_labeler(
        &config.params,
        &config.design,
        &config.labeler,
        &config.calibration,
        config.master_seed,
    )?;
    let labeler = LabelerSpec {
        theta,
        ..config.labeler
    };
    let corpus = build_training_corpus(
        &config.params,
        &config.design,
        &labeler,
        config.forest.corpus_rows,
        config.master_seed,
    )?;
    let forest = train_forest(&corpus, &config.forest.config, config.master_seed, 3)?;
    Ok(ForestArtifact {
        version: FOREST_ARTIFACT_VERSION,
        labeler,
        n_training_rows: corpus.len(),
        forest,
    })
}

/// One output row: a contrast from one model on one dataset of one replicate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub effect: f64,
    pub n: usize,
    pub replicate: usize,
    pub model: String,
    pub dataset: String,
    pub estimand: String,
    pub estimate: f64,
    pub se: f64,
    pub p: f64,
}

fn contrast_row(
    effect: f64,
    n: usize,
    replicate: usize,
    model: &str,
    dataset: &str,
    c: &ContrastResult,
) -> ReplicateRow {
    ReplicateRow {
        effect,
        n,
        replicate,
        model: model.into(),
        dataset: dataset.into(),
        estimand: c.estimand.label().into(),
        estimate: c.estimate,
        se: c.se,
        p: c.p,
    }
}

fn operational_dropout(s: &SubjectRecord) -> Option<Discontinuation> {
    s.dropout.map(|d| Discontinuation {
        time: d.time,
        reason: match d.cause {
            DropoutCause::Inefficacy => DiscontinuationReason::LackOfEfficacy,
            DropoutCause::Intolerability => DiscontinuationReason::AdverseEvent,
            DropoutCause::Mcar => DiscontinuationReason::Administrative,
        },
    })
}

/// Simulated trial with PACC datasets and survival datasets on both the
/// complete and observed sides.
pub struct TrialData {
    pub subjects: Vec<SubjectRecord>,
    pub long_complete: LongitudinalDataset,
    pub long_observed: LongitudinalDataset,
    pub surv_complete: SurvivalDataset,
    pub surv_observed: SurvivalDataset,
}

/// Simulate one trial: subjects, trajectories, dropout, counterfactuals,
/// censoring, forest diagnoses, and the four analysis datasets.
pub fn simulate_trial(
    config: &ScenarioConfig,
    prepared: &PreparedParams,
    forest: &Forest,
    effect: f64,
    n: usize,
    replicate: usize,
) -> Result<TrialData> {
    let mut design = config.design.clone();
    design.n_total = n;
    design.effect_size = effect;
    design.seed = config.master_seed;
    let spec = config.dropout.unwrap_or_else(|| DropoutSpec::for_effect(effect));
    let master = config.master_seed;
    let ekey = index_of_f64(effect);

    let mut subjects: Vec<SubjectRecord> = (0..n)
        .map(|i| {
            let key = [ekey, n as u64, replicate as u64, i as u64];
            let mut srng = stream(master, Domain::Subject, &key);
            let mut subj = draw_subject(prepared, &design, i as u32, &mut srng);
            let mut erng = stream(master, Domain::Enrollment, &key);
            let (enroll, follow) = enrollment_and_followup(&design, &mut erng);
            subj.enrollment_time = enroll;
            subj.follow_up_limit = follow;
            let mut nrng = stream(master, Domain::Noise, &key);
            draw_noise(&mut subj, &design, &mut nrng);
            let m = design.slope_multiplier(subj.arm);
            fill_trajectory(&mut subj, prepared, &design, SlopeSchedule::Constant(m));
            let mut drng = stream(master, Domain::Dropout, &key);
            subj.dropout = assign_dropout(&subj, &spec, &mut drng);
            apply_counterfactual(&mut subj, prepared, &design, &spec);
            censor(&mut subj, &design);
            subj
        })
        .collect();

    // forest diagnosis of every visit of the (adjusted) complete trajectory
    let mut features = vec![0.0f64; N_OUTCOMES + 2];
    for s in subjects.iter_mut() {
        s.diagnosis_sequence = s
            .complete_trajectory
            .iter()
            .map(|z| {
                features[..N_OUTCOMES].copy_from_slice(z);
                features[N_OUTCOMES] = s.age;
                features[N_OUTCOMES + 1] = s.apoe4 as f64;
                forest.predict(&features)
            })
            .collect();
    }

    // per-trial baseline statistics of the four PACC components
    let stats = baseline_stats(&subjects)?;

    // longitudinal datasets over [0, horizon]
    let horizon = design.analysis_horizon;
    let analysis_times: Vec<f64> = design
        .visit_grid
        .iter()
        .copied()
        .filter(|&t| t <= horizon + 1e-9)
        .collect();
    let infos: Vec<SubjectInfo> = subjects
        .iter()
        .map(|s| SubjectInfo {
            id: s.id,
            arm: s.arm,
            age: s.age,
            apoe4: s.apoe4 as f64,
            dropout: operational_dropout(s),
        })
        .collect();
    let mut rows_complete = Vec::new();
    let mut rows_observed = Vec::new();
    for s in &subjects {
        for (j, &t) in design.visit_grid.iter().enumerate() {
            if t > horizon + 1e-9 || j >= s.n_visits() {
                break;
            }
            if let Some(p) = pacc_of(&s.complete_trajectory[j], &stats) {
                rows_complete.push(LongRow {
                    subject: s.id,
                    time: t,
                    pacc: p,
                });
            }
            if let Some(obs) = &s.observed_trajectory[j] {
                if let Some(p) = pacc_of(obs, &stats) {
                    rows_observed.push(LongRow {
                        subject: s.id,
                        time: t,
                        pacc: p,
                    });
                }
            }
        }
    }
    let long_complete = LongitudinalDataset::new(
        rows_complete,
        infos.clone(),
        analysis_times.clone(),
        horizon,
    )?;
    let long_observed = LongitudinalDataset::new(rows_observed, infos, analysis_times, horizon)?;

    // survival datasets: complete uses the common-close follow-up, observed
    // is additionally censored at dropout
    let first_post = design.visit_grid.get(1).copied().unwrap_or(horizon);
    let mut surv_c = Vec::new();
    let mut surv_o = Vec::new();
    for s in &subjects {
        let (tc, ec) = progression_time(&s.diagnosis_sequence, &design.visit_grid, s.follow_up_limit)?;
        surv_c.push(SurvRow {
            subject: s.id,
            arm: s.arm,
            time: tc.max(first_post), // a baseline diagnosis is recorded at the first follow-up visit
            event: ec,
            age: s.age,
            apoe4: s.apoe4 as f64,
        });
        let fo = observed_follow_up(s);
        let (to, eo) = progression_time(&s.diagnosis_sequence, &design.visit_grid, fo)?;
        surv_o.push(SurvRow {
            subject: s.id,
            arm: s.arm,
            time: to.max(first_post),
            event: eo,
            age: s.age,
            apoe4: s.apoe4 as f64,
        });
    }
    Ok(TrialData {
        subjects,
        long_complete,
        long_observed,
        surv_complete: SurvivalDataset::new(surv_c)?,
        surv_observed: SurvivalDataset::new(surv_o)?,
    })
}

fn baseline_stats(subjects: &[SubjectRecord]) -> Result<[BaselineStats; 4]> {
    let mut out = Vec::with_capacity(4);
    for comp in PACC_COMPONENTS {
        let k = comp.index();
        let vals: Vec<f64> = subjects
            .iter()
            .filter(|s| !s.complete_trajectory.is_empty())
            .map(|s| s.complete_trajectory[0][k])
            .collect();
        if vals.len() < 2 {
            return Err(Error::Data("too few baseline observations".into()));
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        out.push(BaselineStats::new(mean, sd.max(1e-9), 1.0)?);
    }
    Ok(out.try_into().unwrap())
}

fn pacc_of(z: &[f64; N_OUTCOMES], stats: &[BaselineStats; 4]) -> Option<f64> {
    let comps: [Option<f64>; 4] =
        std::array::from_fn(|i| Some(z[PACC_COMPONENTS[i].index()]));
    compute_pacc(&comps, stats)
}

/// Run one replicate: fit all four models on the observed and complete
/// datasets and the three mixture-adjusted contrasts on the observed data.
/// Individual fit failures are skipped (the replicate is not discarded).
pub fn run_replicate(
    config: &ScenarioConfig,
    prepared: &PreparedParams,
    forest: &Forest,
    effect: f64,
    n: usize,
    replicate: usize,
) -> Result<Vec<ReplicateRow>> {
    let trial = simulate_trial(config, prepared, forest, effect, n, replicate)?;
    let horizon = config.design.analysis_horizon;
    let mut rows = Vec::with_capacity(11);
    for (dataset, long, surv) in [
        ("observed", &trial.long_observed, &trial.surv_observed),
        ("complete", &trial.long_complete, &trial.surv_complete),
    ] {
        if let Ok(c) = fit_mmrm(long).and_then(|f| final_visit_contrast(&f, horizon)) {
            rows.push(contrast_row(effect, n, replicate, "mmrm", dataset, &c));
        }
        if let Ok(c) = fit_clda(long, 1).and_then(|f| final_visit_contrast(&f, horizon)) {
            rows.push(contrast_row(effect, n, replicate, "clda1", dataset, &c));
        }
        if let Ok(c) = fit_clda(long, 2).and_then(|f| area_between_curves(&f, 0.0, horizon)) {
            rows.push(contrast_row(effect, n, replicate, "clda2", dataset, &c));
        }
        if let Ok(c) = fit_coxph(surv).and_then(|f| hazard_contrast(&f)) {
            rows.push(contrast_row(effect, n, replicate, "coxph", dataset, &c));
        }
    }
    for base in [BaseModel::Mmrm, BaseModel::Clda1, BaseModel::Clda2] {
        if let Ok(c) = mehrotra_adjust(&trial.long_observed, base) {
            let name = format!("{}_mehrotra", base.label());
            rows.push(contrast_row(effect, n, replicate, &name, "observed", &c));
        }
    }
    Ok(rows)
}

/// Power / Type I error for one (effect, n, model, dataset) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PowerCell {
    pub effect: f64,
    pub n: usize,
    pub model: String,
    pub dataset: String,
    pub n_success: usize,
    pub n_failed: usize,
    pub rejection_rate: f64,
}

/// Missingness bias for one (effect, n, model) cell: medians and inclusive
/// (Tukey-hinge) quartiles of the per-replicate observed-minus-complete
/// estimates, absolute and as a percent of the complete-data estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasCell {
    pub effect: f64,
    pub n: usize,
    pub model: String,
    pub n_pairs: usize,
    pub bias_median: f64,
    pub bias_q1: f64,
    pub bias_q3: f64,
    pub bias_pct_median: f64,
    pub bias_pct_q1: f64,
    pub bias_pct_q3: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub power: Vec<PowerCell>,
    pub bias: Vec<BiasCell>,
}

/// Median of a sorted slice (midpoint of the two central values when even).
fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Inclusive quartiles: each half includes the median element when the count
/// is odd, so {10,20,30} gives (15, 20, 25).
fn quartiles(values: &mut Vec<f64>) -> (f64, f64, f64) {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    let med = median_sorted(values);
    if n == 1 {
        return (values[0], med, values[0]);
    }
    let half = if n % 2 == 1 { n / 2 + 1 } else { n / 2 };
    let q1 = median_sorted(&values[..half]);
    let q3 = median_sorted(&values[n - half..]);
    (q1, med, q3)
}

const MODEL_ORDER: [&str; 7] = [
    "mmrm",
    "clda1",
    "clda2",
    "coxph",
    "mmrm_mehrotra",
    "clda1_mehrotra",
    "clda2_mehrotra",
];

/// Aggregate replicate rows into rejection rates and bias summaries.
/// Mixture-adjusted models pair their observed estimate with the complete
/// estimate of the base model (on complete data the mixture has no dropouts
/// to correct). Empty cells are omitted rather than reported as zero.
pub fn summarize(rows: &[ReplicateRow], alpha: f64, replicates: usize) -> ScenarioSummary {
    let mut cells: Vec<(f64, usize)> = rows.iter().map(|r| (r.effect, r.n)).collect();
    cells.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cells.dedup_by(|a, b| a == b);

    let mut power = Vec::new();
    let mut bias = Vec::new();
    for &(effect, n) in &cells {
        for model in MODEL_ORDER {
            for dataset in ["observed", "complete"] {
                if model.ends_with("_mehrotra") && dataset == "complete" {
                    continue;
                }
                let sel: Vec<&ReplicateRow> = rows
                    .iter()
                    .filter(|r| {
                        r.effect == effect
                            && r.n == n
                            && r.model == model
                            && r.dataset == dataset
                            && r.p.is_finite()
                    })
                    .collect();
                if sel.is_empty() {
                    continue;
                }
                let rejections = sel.iter().filter(|r| r.p < alpha).count();
                power.push(PowerCell {
                    effect,
                    n,
                    model: model.into(),
                    dataset: dataset.into(),
                    n_success: sel.len(),
                    n_failed: replicates.saturating_sub(sel.len()),
                    rejection_rate: rejections as f64 / sel.len() as f64,
                });
            }
            // bias pairs (effect > 0 only; percent needs a nonzero reference)
            if effect <= 0.0 {
                continue;
            }
            let comp_model = model.strip_suffix("_mehrotra").unwrap_or(model);
            let mut deltas = Vec::new();
            let mut pcts = Vec::new();
            for rep in 0..replicates {
                let obs = rows.iter().find(|r| {
                    r.effect == effect
                        && r.n == n
                        && r.replicate == rep
                        && r.model == model
                        && r.dataset == "observed"
                });
                let comp = rows.iter().find(|r| {
                    r.effect == effect
                        && r.n == n
                        && r.replicate == rep
                        && r.model == comp_model
                        && r.dataset == "complete"
                });
                if let (Some(o), Some(c)) = (obs, comp) {
                    let d = o.estimate - c.estimate;
                    deltas.push(d);
                    if c.estimate != 0.0 {
                        pcts.push(100.0 * d / c.estimate);
                    }
                }
            }
            if deltas.is_empty() {
                continue;
            }
            let n_pairs = deltas.len();
            let (q1, med, q3) = quartiles(&mut deltas);
            let (pq1, pmed, pq3) = quartiles(&mut pcts);
            bias.push(BiasCell {
                effect,
                n,
                model: model.into(),
                n_pairs,
                bias_median: med,
                bias_q1: q1,
                bias_q3: q3,
                bias_pct_median: pmed,
                bias_pct_q1: pq1,
                bias_pct_q3: pq3,
            });
        }
    }
    ScenarioSummary { power, bias }
}

/// Everything `run-scenario` produces.
pub struct ScenarioOutputs {
    pub rows: Vec<ReplicateRow>,
    pub summary: ScenarioSummary,
}

/// Run the full grid of (effect, n) cells. Replicates run in parallel and
/// merge in index order.
pub fn run_scenario(config: &ScenarioConfig, artifact: &ForestArtifact) -> Result<ScenarioOutputs> {
    config.validate()?;
    let prepared = config.params.prepare()?;
    let mut tasks = Vec::new();
    for &n in &config.n_grid {
        for &effect in &config.effect_grid {
            for rep in 0..config.replicates {
                tasks.push((effect, n, rep));
            }
        }
    }
    let results: Vec<Vec<ReplicateRow>> = tasks
        .par_iter()
        .map(|&(effect, n, rep)| {
            run_replicate(config, &prepared, &artifact.forest, effect, n, rep)
                .unwrap_or_default()
        })
        .collect();
    let rows: Vec<ReplicateRow> = results.into_iter().flatten().collect();
    let summary = summarize(&rows, config.alpha, config.replicates);
    Ok(ScenarioOutputs { rows, summary })
}

// ---------------------------------------------------------------------------
// CSV emission
// ---------------------------------------------------------------------------

fn header_comment(config: &ScenarioConfig) -> String {
    format!(
        "# config_hash={} master_seed={}\n",
        config.hash(),
        config.master_seed
    )
}

pub fn replicates_csv(config: &ScenarioConfig, rows: &[ReplicateRow]) -> String {
    let mut out = header_comment(config);
    out.push_str("effect,n,replicate,model,dataset,estimand,estimate,se,p\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.10e},{:.10e},{:.10e}\n",
            r.effect, r.n, r.replicate, r.model, r.dataset, r.estimand, r.estimate, r.se, r.p
        ));
    }
    out
}

pub fn parse_replicates_csv(text: &str) -> Result<Vec<ReplicateRow>> {
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.starts_with('#') || line.starts_with("effect,") || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::Parse(format!("bad replicate row: {line}")));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|e| Error::Parse(format!("bad number {s}: {e}")))
        };
        rows.push(ReplicateRow {
            effect: num(f[0])?,
            n: num(f[1])? as usize,
            replicate: num(f[2])? as usize,
            model: f[3].into(),
            dataset: f[4].into(),
            estimand: f[5].into(),
            estimate: num(f[6])?,
            se: num(f[7])?,
            p: num(f[8])?,
        });
    }
    Ok(rows)
}

pub fn power_csv(config: &ScenarioConfig, summary: &ScenarioSummary) -> String {
    let mut out = header_comment(config);
    out.push_str("n,effect,model,dataset,n_success,n_failed,rejection_rate\n");
    for c in &summary.power {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.6}\n",
            c.n, c.effect, c.model, c.dataset, c.n_success, c.n_failed, c.rejection_rate
        ));
    }
    out
}

pub fn bias_csv(config: &ScenarioConfig, summary: &ScenarioSummary) -> String {
    let mut out = header_comment(config);
    out.push_str("n,effect,model,n_pairs,median,q1,q3\n");
    for c in &summary.bias {
        out.push_str(&format!(
            "{},{},{},{},{:.10e},{:.10e},{:.10e}\n",
            c.n, c.effect, c.model, c.n_pairs, c.bias_median, c.bias_q1, c.bias_q3
        ));
    }
    out
}

pub fn bias_percent_csv(config: &ScenarioConfig, summary: &ScenarioSummary) -> String {
    let mut out = header_comment(config);
    out.push_str("n,effect,model,n_pairs,median,q1,q3\n");
    for c in &summary.bias {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6}\n",
            c.n, c.effect, c.model, c.n_pairs, c.bias_pct_median, c.bias_pct_q1, c.bias_pct_q3
        ));
    }
    out
}

/// Kaplan-Meier curves of one replicate's observed survival data, per arm.
pub fn km_curves_csv(config: &ScenarioConfig, trial: &TrialData) -> Result<String> {
    let mut out = header_comment(config);
    out.push_str("arm,time,survival,se,ci_lower,ci_upper,n_risk,n_events\n");
    for arm in [Arm::Placebo, Arm::Treatment] {
        let km = kaplan_meier(&trial.surv_observed, Some(arm))?;
        let label = match arm {
            Arm::Placebo => "placebo",
            Arm::Treatment => "treatment",
        };
        for i in 0..km.times.len() {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6},{},{}\n",
                label,
                km.times[i],
                km.survival[i],
                km.se[i],
                km.ci_lower[i],
                km.ci_upper[i],
                km.n_risk[i],
                km.n_events[i]
            ));
        }
    }
    Ok(out)
}

/// Mean observed/complete PACC per arm and visit from one replicate.
pub fn mean_trajectories_csv(config: &ScenarioConfig, trial: &TrialData) -> Result<String> {
    let mut out = header_comment(config);
    out.push_str("dataset,arm,time,mean_pacc,n\n");
    for (dataset, long) in [
        ("observed", &trial.long_observed),
        ("complete", &trial.long_complete),
    ] {
        for arm in [Arm::Placebo, Arm::Treatment] {
            for &t in &long.visit_times {
                let vals: Vec<f64> = long
                    .rows()
                    .iter()
                    .filter(|r| {
                        (r.time - t).abs() < 1e-9
                            && long.subject(r.subject).map(|s| s.arm) == Some(arm)
                    })
                    .map(|r| r.pacc)
                    .collect();
                if vals.is_empty() {
                    continue;
                }
                let label = match arm {
                    Arm::Placebo => "placebo",
                    Arm::Treatment => "treatment",
                };
                out.push_str(&format!(
                    "{},{},{},{:.6},{}\n",
                    dataset,
                    label,
                    t,
                    vals.iter().sum::<f64>() / vals.len() as f64,
                    vals.len()
                ));
            }
        }
    }
    Ok(out)
}

/// Write the standard output files of `run-scenario` into a directory.
pub fn write_outputs(
    config: &ScenarioConfig,
    outputs: &ScenarioOutputs,
    dir: &Path,
    curves_from: Option<&TrialData>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("replicates.csv"), replicates_csv(config, &outputs.rows))?;
    std::fs::write(dir.join("power.csv"), power_csv(config, &outputs.summary))?;
    std::fs::write(dir.join("bias.csv"), bias_csv(config, &outputs.summary))?;
    std::fs::write(
        dir.join("bias_percent.csv"),
        bias_percent_csv(config, &outputs.summary),
    )?;
    if let Some(trial) = curves_from {
        std::fs::write(dir.join("km_curves.csv"), km_curves_csv(config, trial)?)?;
        std::fs::write(
            dir.join("mean_trajectories.csv"),
            mean_trajectories_csv(config, trial)?,
        )?;
    }
    Ok(())
}
