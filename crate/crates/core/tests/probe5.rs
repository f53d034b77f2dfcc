// Full-criteria pilot under the shipped defaults, with both readings of the
// bias-percent statistic (|median| and median-of-|.|).
// Run: cargo test -p padsim-core --test probe5 -- --nocapture --ignored

use padsim_core::harness::*;
use std::collections::BTreeMap;
use std::time::Instant;

#[test]
#[ignore]
fn probe_full_criteria() {
    let reps: usize = std::env::var("PILOT_REPS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(200);
    let mut config = ScenarioConfig::default();
    config.replicates = reps;
    config.n_grid = vec![1000];
    config.effect_grid = vec![0.0, 0.2, 0.3, 0.4];

    let artifact = fit_forest_artifact(&config).unwrap();
    eprintln!("oob {:.4} theta {:.3}", artifact.forest.oob_error, artifact.labeler.theta);
    let t = Instant::now();
    let out = run_scenario(&config, &artifact).unwrap();
    eprintln!("scenario {:.0}s", t.elapsed().as_secs_f64());

    println!("\nPOWER/TYPE-I (R={reps})");
    for c in &out.summary.power {
        println!(
            "{:>4} {:<16} {:<9} {:>6.3} nok={}",
            c.effect, c.model, c.dataset, c.rejection_rate, c.n_success
        );
    }
    println!("\nBIAS median (q1,q3) | bias%% |median| and median|.|");
    // recompute per-replicate ratios for the two readings
    let mut pairs: BTreeMap<(String, u64), Vec<(f64, f64)>> = BTreeMap::new();
    for r in &out.rows {
        if r.effect <= 0.0 || r.n != 1000 {
            continue;
        }
        let key_obs = (r.model.clone(), r.effect.to_bits());
        if r.dataset == "observed" {
            pairs.entry(key_obs).or_default().push((r.replicate as f64, r.estimate));
        }
    }
    for c in &out.summary.bias {
        println!(
            "{:>4} {:<16} bias {:+.4} ({:+.4},{:+.4})  pct_med {:+6.1}",
            c.effect, c.model, c.bias_median, c.bias_q1, c.bias_q3, c.bias_pct_median
        );
    }
    // median of |pct| per cell
    println!("\nmedian |pct| per (effect, model):");
    for effect in [0.2, 0.3, 0.4] {
        for model in [
            "mmrm",
            "clda1",
            "clda2",
            "mmrm_mehrotra",
            "clda1_mehrotra",
            "clda2_mehrotra",
        ] {
            let base = model.strip_suffix("_mehrotra").unwrap_or(model);
            let mut abs_vals: Vec<f64> = Vec::new();
            for rep in 0..reps {
                let obs = out.rows.iter().find(|r| {
                    r.effect == effect
                        && r.replicate == rep
                        && r.model == model
                        && r.dataset == "observed"
                });
                let comp = out.rows.iter().find(|r| {
                    r.effect == effect
                        && r.replicate == rep
                        && r.model == base
                        && r.dataset == "complete"
                });
                if let (Some(o), Some(c)) = (obs, comp) {
                    if c.estimate != 0.0 {
                        abs_vals.push((100.0 * (o.estimate - c.estimate) / c.estimate).abs());
                    }
                }
            }
            abs_vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let med = if abs_vals.is_empty() {
                f64::NAN
            } else {
                abs_vals[abs_vals.len() / 2]
            };
            println!("{:>4} {:<16} median|pct| {:6.1}", effect, model, med);
        }
    }
}
