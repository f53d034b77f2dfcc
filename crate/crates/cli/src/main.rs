//! `padsim`: simulate pre-symptomatic Alzheimer's trials and compare
//! continuous-outcome models against time-to-progression analysis.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use padsim_core::datagen::Arm;
use padsim_core::diagnosis::ForestArtifact;
use padsim_core::estimators::{
    fit_clda_with, fit_coxph, fit_mmrm_with, optim::OptimOptions, FitResult, LongRow,
    LongitudinalDataset, SubjectInfo, SurvRow, SurvivalDataset,
};
use padsim_core::harness::{
    self, calibrate_labeler, fit_forest_artifact, parse_replicates_csv, run_scenario,
    simulate_trial, write_outputs, ScenarioConfig,
};
use padsim_core::inference::{area_between_curves, final_visit_contrast, hazard_contrast};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "padsim", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Model {
    Mmrm,
    Clda1,
    Clda2,
    Coxph,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Table,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate the labeler threshold and train the diagnosis forest.
    FitForest {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate the labeler threshold and report the achieved placebo
    /// progression fraction on a fresh stream.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the full Monte Carlo grid and write summary CSVs.
    RunScenario {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Forest artifact path (overrides the config; trained in-process
        /// when neither is given).
        #[arg(long)]
        forest: Option<PathBuf>,
        /// Also emit km_curves.csv and mean_trajectories.csv from one
        /// replicate for external plotting.
        #[arg(long, default_value_t = false)]
        emit_curves: bool,
    },
    /// Recompute power/bias summaries from a replicates.csv directory.
    Summarize {
        dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
    },
    /// Fit one model to a dataset file and print the result.
    Analyze {
        /// CSV dataset: longitudinal `subject,arm,age,apoe4,time,pacc` or
        /// survival `subject,arm,age,apoe4,time,event`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        model: Model,
        #[arg(long, default_value_t = 4.5)]
        horizon: f64,
        /// Gradient-norm tolerance for the mixed-model optimizer.
        #[arg(long, default_value_t = 5e-7)]
        grad_tol: f64,
        /// Maximum simplex iterations for the mixed-model optimizer.
        #[arg(long, default_value_t = 400)]
        max_iter: usize,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::FitForest { config, out } => {
            let cfg = load_config(&config)?;
            let artifact = fit_forest_artifact(&cfg)?;
            eprintln!(
                "labeler threshold {:.6}, OOB error {:.4} on {} rows",
                artifact.labeler.theta, artifact.forest.oob_error, artifact.n_training_rows
            );
            artifact.save(&out)?;
            eprintln!("forest artifact written to {}", out.display());
            Ok(())
        }
        Command::Calibrate { config } => {
            let cfg = load_config(&config)?;
            let theta = calibrate_labeler(
                &cfg.params,
                &cfg.design,
                &cfg.labeler,
                &cfg.calibration,
                cfg.master_seed,
            )?;
            let labeler = padsim_core::diagnosis::LabelerSpec {
                theta,
                ..cfg.labeler
            };
            let fresh = harness::placebo_progression_fraction(
                &cfg.params,
                &cfg.design,
                &labeler,
                cfg.calibration.sample_size,
                cfg.master_seed,
                4,
            )?;
            println!("theta = {theta:.6}");
            println!("placebo progression fraction (fresh stream) = {fresh:.4}");
            Ok(())
        }
        Command::RunScenario {
            config,
            out,
            forest,
            emit_curves,
        } => {
            let cfg = load_config(&config)?;
            let artifact_path = forest.or_else(|| cfg.forest_artifact.clone());
            let artifact = match artifact_path {
                Some(p) => {
                    eprintln!("loading forest artifact {}", p.display());
                    ForestArtifact::load(&p)?
                }
                None => {
                    eprintln!("no forest artifact configured; training in-process");
                    fit_forest_artifact(&cfg)?
                }
            };
            let outputs = run_scenario(&cfg, &artifact)?;
            let curves = if emit_curves {
                let prepared = cfg.params.prepare()?;
                let effect = cfg
                    .effect_grid
                    .iter()
                    .copied()
                    .find(|&e| e > 0.0)
                    .unwrap_or(cfg.effect_grid[0]);
                Some(simulate_trial(
                    &cfg,
                    &prepared,
                    &artifact.forest,
                    effect,
                    cfg.n_grid[0],
                    0,
                )?)
            } else {
                None
            };
            write_outputs(&cfg, &outputs, &out, curves.as_ref())?;
            eprintln!(
                "{} replicate rows written to {}",
                outputs.rows.len(),
                out.display()
            );
            Ok(())
        }
        Command::Summarize { dir, format, alpha } => {
            let text = std::fs::read_to_string(dir.join("replicates.csv"))
                .with_context(|| format!("reading {}/replicates.csv", dir.display()))?;
            let rows = parse_replicates_csv(&text)?;
            let replicates = rows.iter().map(|r| r.replicate + 1).max().unwrap_or(0);
            let summary = harness::summarize(&rows, alpha, replicates);
            // reuse the stamped header from the replicate file
            let cfg = ScenarioConfig {
                replicates: replicates.max(1),
                ..ScenarioConfig::default()
            };
            match format {
                Format::Csv => {
                    std::fs::write(dir.join("power.csv"), harness::power_csv(&cfg, &summary))?;
                    std::fs::write(dir.join("bias.csv"), harness::bias_csv(&cfg, &summary))?;
                    std::fs::write(
                        dir.join("bias_percent.csv"),
                        harness::bias_percent_csv(&cfg, &summary),
                    )?;
                    print!("{}", harness::power_csv(&cfg, &summary));
                }
                Format::Table => {
                    println!(
                        "{:>6} {:>6} {:<16} {:<9} {:>8} {:>7}",
                        "n", "effect", "model", "dataset", "success", "power"
                    );
                    for c in &summary.power {
                        println!(
                            "{:>6} {:>6} {:<16} {:<9} {:>8} {:>7.3}",
                            c.n, c.effect, c.model, c.dataset, c.n_success, c.rejection_rate
                        );
                    }
                }
            }
            Ok(())
        }
        Command::Analyze {
            data,
            model,
            horizon,
            grad_tol,
            max_iter,
        } => {
            let text = std::fs::read_to_string(&data)
                .with_context(|| format!("reading {}", data.display()))?;
            let opts = OptimOptions {
                grad_tol,
                max_iter,
                ..OptimOptions::default()
            };
            let fit = match model {
                Model::Coxph => fit_coxph(&parse_survival_csv(&text)?)?,
                Model::Mmrm => fit_mmrm_with(&parse_longitudinal_csv(&text, horizon)?, &opts)?,
                Model::Clda1 => {
                    fit_clda_with(&parse_longitudinal_csv(&text, horizon)?, 1, &opts)?
                }
                Model::Clda2 => {
                    fit_clda_with(&parse_longitudinal_csv(&text, horizon)?, 2, &opts)?
                }
            };
            let contrast = match model {
                Model::Coxph => hazard_contrast(&fit),
                Model::Clda2 => area_between_curves(&fit, 0.0, horizon),
                _ => final_visit_contrast(&fit, horizon),
            };
            println!("{}", fit_json(&fit, contrast.ok().as_ref()));
            Ok(())
        }
    }
}

fn load_config(path: &PathBuf) -> Result<ScenarioConfig> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(ScenarioConfig::from_toml(&text)?)
}

fn parse_arm(s: &str) -> Result<Arm> {
    match s.trim() {
        "treatment" | "trt" | "1" => Ok(Arm::Treatment),
        "placebo" | "pbo" | "0" => Ok(Arm::Placebo),
        other => bail!("unknown arm {other:?}"),
    }
}

/// `subject,arm,age,apoe4,time,pacc` with a header line.
fn parse_longitudinal_csv(text: &str, horizon: f64) -> Result<LongitudinalDataset> {
    let mut rows = Vec::new();
    let mut subjects: Vec<SubjectInfo> = Vec::new();
    let mut times: Vec<f64> = Vec::new();
    for line in text.lines().skip_while(|l| l.starts_with('#')) {
        if line.trim().is_empty() || line.starts_with("subject") {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            bail!("expected 6 columns in longitudinal row: {line}");
        }
        let id: u32 = f[0].trim().parse()?;
        let arm = parse_arm(f[1])?;
        let age: f64 = f[2].trim().parse()?;
        let apoe4: f64 = f[3].trim().parse()?;
        let time: f64 = f[4].trim().parse()?;
        let pacc: f64 = f[5].trim().parse()?;
        if !subjects.iter().any(|s| s.id == id) {
            subjects.push(SubjectInfo {
                id,
                arm,
                age,
                apoe4,
                dropout: None,
            });
        }
        if !times.iter().any(|&t| (t - time).abs() < 1e-9) {
            times.push(time);
        }
        rows.push(LongRow {
            subject: id,
            time,
            pacc,
        });
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(LongitudinalDataset::new(rows, subjects, times, horizon)?)
}

/// `subject,arm,age,apoe4,time,event` with a header line.
fn parse_survival_csv(text: &str) -> Result<SurvivalDataset> {
    let mut rows = Vec::new();
    for line in text.lines().skip_while(|l| l.starts_with('#')) {
        if line.trim().is_empty() || line.starts_with("subject") {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            bail!("expected 6 columns in survival row: {line}");
        }
        rows.push(SurvRow {
            subject: f[0].trim().parse()?,
            arm: parse_arm(f[1])?,
            age: f[2].trim().parse()?,
            apoe4: f[3].trim().parse()?,
            time: f[4].trim().parse()?,
            event: matches!(f[5].trim(), "1" | "true" | "event"),
        });
    }
    Ok(SurvivalDataset::new(rows)?)
}

fn fit_json(fit: &FitResult, contrast: Option<&padsim_core::inference::ContrastResult>) -> String {
    let coefficients: Vec<serde_json::Value> = fit
        .coef_names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            serde_json::json!({
                "name": name,
                "estimate": fit.coef[i],
                "se": fit.cov[(i, i)].max(0.0).sqrt(),
            })
        })
        .collect();
    let variance_components: Vec<serde_json::Value> = fit
        .variance_components
        .iter()
        .map(|(name, v)| serde_json::json!({ "name": name, "value": v }))
        .collect();
    let mut obj = serde_json::json!({
        "model": fit.model,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "loglik": fit.loglik,
        "grad_norm": fit.grad_norm,
        "coefficients": coefficients,
        "variance_components": variance_components,
    });
    if let Some(c) = contrast {
        obj["contrast"] = serde_json::json!({
            "estimand": c.estimand.label(),
            "estimate": c.estimate,
            "se": c.se,
            "z": c.z,
            "p": c.p,
            "hazard_ratio": c.hazard_ratio,
        });
    }
    serde_json::to_string_pretty(&obj).expect("json")
}
