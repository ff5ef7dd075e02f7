use std::fs;
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use attnreg_core::ablation::{default_workers, dominance_suite, evaluation_layer, run_sweep};
use attnreg_core::gradcheck::{run_gradcheck, TrialOutcome};
use attnreg_core::metrics::{head_max_stats, latent_distance, overhead};
use attnreg_core::scaler::random_bound_trial;
use attnreg_core::{run_generation, RegulatorKind, RunRecord, ToyModel};
use serde_json::json;

use crate::config::{parse_bias, CliConfig};
use crate::{AblateArgs, BoundsArgs, GenerateArgs, GradcheckArgs};

fn generate_config(args: &GenerateArgs) -> Result<CliConfig> {
    let mut cfg = CliConfig::load(args.config.as_deref())?;
    cfg.apply_env()?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(p) = &args.prompt {
        cfg.prompt = p.clone();
    }
    if let Some(t) = &args.targets {
        cfg.targets = t.clone();
    }
    if !args.dominance.is_empty() {
        cfg.model.dominance_bias = args.dominance.iter().map(|s| parse_bias(s)).collect::<Result<_>>()?;
    }
    if let Some(r) = args.regulator {
        cfg.regulation.regulator = r;
    }
    if let Some(k) = args.kappa_eos {
        cfg.regulation.scaling.kappa_eos = k;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate().context("invalid configuration")?;
    Ok(cfg)
}

fn write_head_max(path: &Path, record: &RunRecord) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    let last = record.steps() - 1;
    for (i, layer) in record.layers.iter().enumerate() {
        head_max_stats(record, layer.id, last)?.write_csv(&mut out, i == 0)?;
    }
    Ok(())
}

pub fn generate(args: GenerateArgs) -> Result<()> {
    let cfg = generate_config(&args)?;
    let model = ToyModel::new(cfg.model.clone())?;
    let prompt = cfg.prompt()?;
    let regulation = cfg.resolved_regulation()?;
    let regulated = cfg.regulation.regulator != RegulatorKind::None;

    let record = run_generation(&model, &prompt, &cfg.sampler, regulated.then_some(&regulation), cfg.seed)?;
    let baseline = if regulated {
        Some(run_generation(&model, &prompt, &cfg.sampler, None, cfg.seed)?)
    } else {
        None
    };
    let reference = baseline.as_ref().unwrap_or(&record);

    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    record.write_artifacts(dir, |z| model.decode(z.view()), model.config.latent_side)?;
    write_head_max(&dir.join("head_max.csv"), &record)?;

    let eval = evaluation_layer(&model)?;
    let last = cfg.sampler.steps - 1;
    let (reg_stats, base_stats) = (head_max_stats(&record, eval, last)?, head_max_stats(reference, eval, last)?);
    let targets: Vec<_> = cfg
        .targets
        .iter()
        .zip(&regulation.config.targets)
        .map(|(word, &pos)| -> Result<_> {
            Ok(json!({
                "word": word,
                "position": pos,
                "head_mean_max": reg_stats.head_mean(pos)?,
                "baseline_head_mean_max": base_stats.head_mean(pos)?,
            }))
        })
        .collect::<Result<_>>()?;
    let latent_l2 = latent_distance(reference.final_latent(), record.final_latent())?;
    let base_s = reference.timings.total_s;
    let manifest = json!({
        "config": cfg,
        "seeds": { "run": cfg.seed, "model": cfg.model.seed },
        "tokens": prompt.text(),
        "evaluation_layer": eval,
        "targets": targets,
        "latent_l2_vs_baseline": latent_l2,
        "hook_summaries": record.hook_summaries,
        "timings": {
            "regulated_s": record.timings.total_s,
            "baseline_s": base_s,
            "hooks_s": record.timings.hooks_s,
            "overhead": overhead(record.timings.total_s, base_s).ok(),
        },
    });
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;

    println!("wrote {} ({} steps)", dir.display(), cfg.sampler.steps);
    for t in manifest["targets"].as_array().into_iter().flatten() {
        println!(
            "  {:<12} max {:.4} (baseline {:.4})",
            t["word"].as_str().unwrap_or_default(),
            t["head_mean_max"].as_f64().unwrap_or(f64::NAN),
            t["baseline_head_mean_max"].as_f64().unwrap_or(f64::NAN),
        );
    }
    println!("  latent L2 vs baseline {latent_l2:.6}");
    Ok(())
}

pub fn ablate(args: AblateArgs) -> Result<()> {
    let mut cfg = CliConfig::load(args.config.as_deref())?;
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    let workers = args.workers.unwrap_or_else(default_workers);
    if workers == 0 {
        bail!("workers: must be at least 1");
    }
    let start = Instant::now();
    let report = run_sweep(args.sweep, &cfg.model, &cfg.sampler, &cfg.regulation, &dominance_suite(), workers)?;
    let wall_s = start.elapsed().as_secs_f64();

    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("sweep.csv"), report.to_csv())?;
    let summary = json!({
        "sweep": report.sweep,
        "workers": workers,
        "cases": dominance_suite().len(),
        "baseline": report.baseline,
        "rows": report.rows,
        "wall_s": wall_s,
    });
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;

    println!("{} sweep, baseline coverage {:.3}", report.sweep, report.baseline.target_coverage);
    for row in &report.rows {
        println!(
            "  {:>8.4}  coverage {:.3}  quantile {:.4}  index {:.3}  overhead {:.2}",
            row.value, row.target_coverage, row.mean_quantile, row.dominance_index, row.overhead
        );
    }
    Ok(())
}

pub fn gradcheck(args: GradcheckArgs) -> Result<()> {
    let report = run_gradcheck(args.trials, args.seed, &Default::default())?;
    let skipped: Vec<u64> = report
        .trials
        .iter()
        .filter_map(|t| match t {
            TrialOutcome::Skipped { seed, .. } => Some(*seed),
            TrialOutcome::Checked { .. } => None,
        })
        .collect();
    println!("checked {} instances, max relative error {:.3e}", report.checked, report.max_rel_err);
    println!("skipped seeds (quantile ties): {skipped:?}");
    if !report.passed(args.tol) {
        bail!("max relative error {:.3e} is not below {:.1e}", report.max_rel_err, args.tol);
    }
    Ok(())
}

pub fn bounds(args: BoundsArgs) -> Result<()> {
    let mut violations = 0u64;
    for seed in args.seed..args.seed + args.trials {
        let check = random_bound_trial(seed, args.tau, args.kappa_eos)?;
        if let Some((token, margin)) = check.witness {
            violations += 1;
            println!(
                "violation: seed {seed} token {token} max {:.6} bound {:.6} margin {margin:.3e}",
                check.m_prime, check.bound
            );
        }
    }
    println!("{} trials, {violations} violations", args.trials);
    if violations > 0 {
        bail!("{violations} bound violations");
    }
    Ok(())
}
