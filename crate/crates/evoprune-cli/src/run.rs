//! Command dispatch and artifact writing.
//!
//! Every command writes its outputs under the configured output directory
//! and never mutates its inputs. Re-running with the same config and seed
//! reproduces all numeric artifacts byte for byte; wall-clock timestamps are
//! confined to `run_meta.json`.

use crate::config::{load_splits, Command, RunConfig};
use evoprune::container;
use evoprune::data::Dataset;
use evoprune::distill::{finetune_kd, trajectory_csv};
use evoprune::optim::{evaluate, fit, seeded_stream};
use evoprune::pruner::{prune_model, sensitivity_scan, PruneOptions};
use evoprune::stats::model_stats;
use evoprune::{Error, Result};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub fn run(cfg: &RunConfig) -> Result<()> {
    let started = Instant::now();
    let out = cfg
        .out_dir
        .clone()
        .ok_or_else(|| Error::InvalidArgument("no output directory configured".into()))?;
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("config.json"), cfg.canonical_json())?;

    match cfg.command {
        Command::Train => cmd_train(cfg, &out)?,
        Command::Sensitivity => cmd_sensitivity(cfg, &out)?,
        Command::Prune => cmd_prune(cfg, &out)?,
        Command::Finetune => cmd_finetune(cfg, &out)?,
        Command::Eval => cmd_eval(cfg, &out)?,
        Command::Stats => cmd_stats(cfg, &out)?,
    }

    // Timestamps live only here so everything else stays reproducible.
    let meta = serde_json::json!({
        "command": format!("{:?}", cfg.command).to_lowercase(),
        "unix_time_seconds": std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        "duration_seconds": started.elapsed().as_secs_f64(),
    });
    std::fs::write(
        out.join("run_meta.json"),
        serde_json::to_string_pretty(&meta)? + "\n",
    )?;
    Ok(())
}

fn require_train(cfg: &RunConfig) -> Result<(Dataset, Option<Dataset>)> {
    let (train, test) = load_splits(&cfg.dataset)?;
    let train = train.ok_or_else(|| Error::InvalidArgument("command needs train data".into()))?;
    Ok((train, test))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (train, test) = require_train(cfg)?;
    let mut net = cfg.model.build(cfg.seed)?;
    let policy = if cfg.train.augment.is_disabled() {
        None
    } else {
        Some(&cfg.train.augment)
    };
    let mut rng = seeded_stream(cfg.seed, 20);
    let losses = fit(
        &mut net,
        &train,
        &cfg.train.optimizer,
        cfg.train.epochs,
        &mut rng,
        policy,
    )?;
    container::save_model(&net, &out.join("model"))?;

    let mut log = String::from("epoch,loss\n");
    for (e, l) in losses.iter().enumerate() {
        log.push_str(&format!("{e},{l}\n"));
    }
    std::fs::write(out.join("train_log.csv"), log)?;

    let accuracy = test.as_ref().map(|t| evaluate(&net, t)).transpose()?;
    write_json(
        &out.join("metrics.json"),
        &serde_json::json!({
            "final_train_loss": losses.last(),
            "test_accuracy": accuracy,
        }),
    )?;
    if let Some(acc) = accuracy {
        println!("trained {} epochs, test accuracy {acc}", cfg.train.epochs);
    } else {
        println!("trained {} epochs", cfg.train.epochs);
    }
    Ok(())
}

fn cmd_sensitivity(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (train, test) = require_train(cfg)?;
    let test = test.ok_or_else(|| Error::InvalidArgument("sensitivity needs test data".into()))?;
    let net = cfg.model.build(cfg.seed)?;
    let profile = sensitivity_scan(
        &net,
        &train,
        &test,
        &cfg.rates,
        &cfg.ga,
        &cfg.sampling,
        cfg.seed,
    )?;
    std::fs::write(out.join("sensitivity.csv"), profile.csv())?;
    write_json(&out.join("profile.json"), &profile)?;
    println!(
        "scanned {} rows, baseline accuracy {}",
        profile.rows.len(),
        profile.baseline_accuracy
    );
    Ok(())
}

fn cmd_prune(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (train, test) = require_train(cfg)?;
    let test = test.ok_or_else(|| Error::InvalidArgument("prune needs test data".into()))?;
    let net = cfg.model.build(cfg.seed)?;
    let opts = PruneOptions {
        ga: cfg.ga,
        sample: cfg.sampling,
        finetune: cfg.finetune.clone(),
        distill: cfg.distill.clone(),
        seed: cfg.seed,
    };
    let (pruned, report) = prune_model(&net, &cfg.plan, &train, &test, &opts)?;
    container::save_model(&pruned, &out.join("model"))?;
    write_json(&out.join("report.json"), &report)?;
    std::fs::write(out.join("layers.csv"), report.layers_csv())?;

    let ga_dir = out.join("ga_logs");
    std::fs::create_dir_all(&ga_dir)?;
    for log in &report.ga_logs {
        let mut csv = String::from("generation,best_error,mean_error,best_mask\n");
        for r in &log.history {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                r.generation, r.best_error, r.mean_error, r.best_mask
            ));
        }
        std::fs::write(ga_dir.join(format!("{}.csv", log.layer)), csv)?;
    }
    let mask_dir = out.join("masks");
    std::fs::create_dir_all(&mask_dir)?;
    for layer in &report.layers {
        write_json(
            &mask_dir.join(format!("{}.json", layer.producer)),
            &serde_json::json!({
                "layer": layer.producer,
                "keep": layer.kept,
                "mask": layer.mask,
            }),
        )?;
    }
    println!(
        "pruned {} layers: params {} -> {}, flops {} -> {}, accuracy {} -> {}",
        report.layers.len(),
        report.baseline_params,
        report.pruned_params,
        report.baseline_flops,
        report.pruned_flops,
        report.baseline_accuracy,
        report.final_accuracy
    );
    Ok(())
}

fn cmd_finetune(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (train, test) = require_train(cfg)?;
    let mut student = cfg.model.build(cfg.seed)?;
    let teacher = match &cfg.teacher {
        Some(t) => Some(t.build(cfg.seed)?),
        None => None,
    };
    let distill = match (&teacher, cfg.distill.beta > 0.0) {
        (Some(_), _) => cfg.distill.clone(),
        (None, false) => cfg.distill.clone(),
        (None, true) => {
            return Err(Error::InvalidArgument(
                "finetune with beta > 0 needs a teacher model".into(),
            ))
        }
    };
    // Without a teacher the attention term is off and the reference model is
    // never touched; pass the student's frozen copy for uniformity.
    let teacher = teacher.unwrap_or_else(|| student.clone());
    let mut rng = seeded_stream(cfg.seed, 30);
    let track = finetune_kd(&mut student, &teacher, &train, &distill, &mut rng)?;
    container::save_model(&student, &out.join("model"))?;
    std::fs::write(out.join("distill_log.csv"), trajectory_csv(&track))?;
    let accuracy = test.as_ref().map(|t| evaluate(&student, t)).transpose()?;
    write_json(
        &out.join("metrics.json"),
        &serde_json::json!({ "test_accuracy": accuracy }),
    )?;
    if let Some(acc) = accuracy {
        println!("fine-tuned {} epochs, test accuracy {acc}", distill.epochs);
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<()> {
    let (_, test) = load_splits(&cfg.dataset)?;
    let test = test.ok_or_else(|| Error::InvalidArgument("eval needs test data".into()))?;
    let net = cfg.model.build(cfg.seed)?;
    let accuracy = evaluate(&net, &test)?;
    write_json(
        &out.join("metrics.json"),
        &serde_json::json!({ "accuracy": accuracy }),
    )?;
    println!("accuracy {accuracy}");
    Ok(())
}

fn cmd_stats(cfg: &RunConfig, out: &Path) -> Result<()> {
    let net = cfg.model.build(cfg.seed)?;
    let stats = model_stats(&net)?;
    write_json(
        &out.join("stats.json"),
        &serde_json::json!({ "params": stats.params, "flops": stats.flops }),
    )?;
    println!(
        "params {} ({:.2}M)  flops {} ({:.3}e9)",
        stats.params,
        stats.params as f64 / 1e6,
        stats.flops,
        stats.flops as f64 / 1e9
    );
    Ok(())
}

/// Exit-code classification: 1 for bad inputs, 2 for runtime or numeric
/// failures.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_)
        | Error::UnknownFormat(_)
        | Error::Manifest(_)
        | Error::Json(_)
        | Error::CorruptFile { .. }
        | Error::UnknownLayer(_)
        | Error::NotConv(_)
        | Error::PruneBoundary(..)
        | Error::ShapeMismatch(_) => 1,
        Error::NonFinite(_) | Error::Divergence { .. } | Error::Io(_) | Error::EmptyDataset => 2,
        Error::AtLayer { source, .. } => exit_code(source),
    }
}

/// Overrides from the command line applied onto a parsed config.
pub fn apply_overrides(cfg: &mut RunConfig, seed: Option<u64>, out: Option<PathBuf>) {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = Some(o);
    }
}
