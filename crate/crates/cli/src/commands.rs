use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use mpsl_core::checkpoint::{write_atomic, Checkpoint};
use mpsl_core::data::{perturb_dataset, Dataset, PerturbKind, PerturbationSpec};
use mpsl_core::gradcheck::{run_gradcheck, GRADCHECK_TOLERANCE};
use mpsl_core::network::{infer_batch, Network, PathMode};
use mpsl_core::numerics::SeededRng;
use mpsl_core::trainer::{ablate_lambda, evaluate, EpochMetrics, EvalMetrics, Trainer, ABLATION_MODES};

use crate::config::RunConfig;
use crate::metrics::{self, format_lambda, run_id, MetricsRow};
use crate::CliError;

/// Stream id for the per-trial perturbation seeds.
const PERTURB_STREAM: u64 = 2;

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut rc = RunConfig::load(path)?;
    if let Some(s) = seed {
        rc.seed = s;
    }
    Ok(rc)
}

fn prepare_out_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))
}

fn load_checkpoint(path: &Path, rc: &RunConfig, test: &Dataset) -> Result<Checkpoint, CliError> {
    let ck = Checkpoint::load(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    if ck.net.input_dim() != test.dim() {
        return Err(CliError::usage(format!(
            "checkpoint expects {} inputs, dataset has {}",
            ck.net.input_dim(),
            test.dim()
        )));
    }
    if ck.config_hash != rc.hash() {
        eprintln!("warning: checkpoint was trained with a different config");
    }
    Ok(ck)
}

struct RowBase<'a> {
    run_id: &'a str,
    command: &'a str,
    mode: &'a str,
    seed: u64,
}

impl RowBase<'_> {
    fn row(&self, split: &str, inference: &str, net: &Network, epoch: usize, loss: f64, accuracy: f64) -> MetricsRow {
        MetricsRow {
            run_id: self.run_id.to_string(),
            command: self.command.to_string(),
            split: split.to_string(),
            mode: self.mode.to_string(),
            inference: inference.to_string(),
            kind: "clean".into(),
            level: 0.0,
            epoch,
            seed: self.seed,
            loss,
            accuracy,
            accuracy_sd: 0.0,
            lambda: format_lambda(&net.layers.iter().map(|l| l.lambda).collect::<Vec<_>>()),
            lambda_f: net.sbp.lambda_f,
            lambda_p: net.sbp.lambda_p,
            wall_seconds: 0.0,
        }
    }
}

fn inference_name(merged: bool) -> &'static str {
    if merged {
        "merged"
    } else {
        "three-path"
    }
}

pub fn train(config: &Path, seed: Option<u64>, out_dir: &Path, checkpoint: Option<PathBuf>) -> Result<(), CliError> {
    let rc = load_config(config, seed)?;
    let cfg = rc.train_config()?;
    let (train, test) = rc.load_data()?;
    prepare_out_dir(out_dir)?;
    let hash = rc.hash();
    let id = run_id("train", hash, rc.seed);
    let mode = cfg.lambda_mode.name();
    let timesteps = cfg.timesteps;
    let epochs = cfg.epochs;
    let mut tr = Trainer::new(cfg)?;
    let base = RowBase { run_id: &id, command: "train", mode, seed: rc.seed };
    let metrics_path = out_dir.join("metrics-train.csv");
    let mut rows = Vec::new();
    for _ in 0..epochs {
        let t0 = Instant::now();
        let m = match tr.train_epoch(&train) {
            Ok(m) => m,
            Err(e) => {
                metrics::write(&metrics_path, &rows)?;
                return Err(e.into());
            }
        };
        let train_secs = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let ev = evaluate(&tr.net, &test, timesteps, true)?;
        let mut r = base.row("train", "plastic", &tr.net, m.epoch, m.loss, m.accuracy);
        r.wall_seconds = train_secs;
        rows.push(r);
        let mut r = base.row("test", "merged", &tr.net, m.epoch, ev.loss, ev.accuracy);
        r.wall_seconds = t1.elapsed().as_secs_f64();
        rows.push(r);
        eprintln!(
            "epoch {}: train loss {:.4} acc {:.4} | test loss {:.4} acc {:.4} ({:.1}s)",
            m.epoch, m.loss, m.accuracy, ev.loss, ev.accuracy, train_secs
        );
    }
    metrics::write(&metrics_path, &rows)?;
    let ck_path = checkpoint.unwrap_or_else(|| out_dir.join("model.ckpt"));
    Checkpoint::from_trainer(&tr, hash)
        .save(&ck_path)
        .map_err(|e| CliError::io(format!("{}: {e}", ck_path.display())))?;
    Ok(())
}

pub fn eval(config: &Path, seed: Option<u64>, out_dir: &Path, checkpoint: &Path, merged: bool) -> Result<(), CliError> {
    let rc = load_config(config, seed)?;
    let cfg = rc.train_config()?;
    let (_, test) = rc.load_data()?;
    let ck = load_checkpoint(checkpoint, &rc, &test)?;
    prepare_out_dir(out_dir)?;
    let t0 = Instant::now();
    let ev = evaluate(&ck.net, &test, cfg.timesteps, merged)?;
    let id = run_id("eval", rc.hash(), rc.seed);
    let base = RowBase { run_id: &id, command: "eval", mode: cfg.lambda_mode.name(), seed: rc.seed };
    let mut r = base.row("test", inference_name(merged), &ck.net, ck.epoch as usize, ev.loss, ev.accuracy);
    r.wall_seconds = t0.elapsed().as_secs_f64();
    metrics::write(&out_dir.join("metrics-eval.csv"), &[r])?;
    println!("test accuracy {:.4} loss {:.4}", ev.accuracy, ev.loss);
    Ok(())
}

/// Default level grid per kind; crop sides scale with the image.
pub fn default_levels(kind: PerturbKind, side: usize) -> Vec<f64> {
    match kind {
        PerturbKind::Gaussian => vec![0.1, 0.2, 0.3, 0.4, 0.5],
        PerturbKind::SaltPepper => vec![0.05, 0.1, 0.15, 0.2, 0.25],
        PerturbKind::CenterCrop => (2..=6)
            .rev()
            .map(|k| ((side * k) as f64 / 7.0).round().max(1.0))
            .collect(),
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[allow(clippy::too_many_arguments)]
pub fn robustness(
    config: &Path,
    seed: Option<u64>,
    out_dir: &Path,
    checkpoint: &Path,
    kinds: &[String],
    levels: Option<&[f64]>,
    trials: usize,
    merged: bool,
) -> Result<(), CliError> {
    if trials == 0 {
        return Err(CliError::usage("--trials must be >= 1"));
    }
    let kinds = kinds
        .iter()
        .map(|k| k.parse::<PerturbKind>().map_err(|e| CliError::usage(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let rc = load_config(config, seed)?;
    let cfg = rc.train_config()?;
    let (_, test) = rc.load_data()?;
    let ck = load_checkpoint(checkpoint, &rc, &test)?;
    prepare_out_dir(out_dir)?;

    let mut cells = Vec::new();
    for &kind in &kinds {
        let mut lv = match levels {
            Some([]) => return Err(CliError::usage("--levels is empty")),
            Some(l) => l.to_vec(),
            None => default_levels(kind, test.width.min(test.height)),
        };
        lv.sort_by(f64::total_cmp);
        for level in lv {
            let spec = PerturbationSpec { kind, level };
            spec.validate(test.width, test.height).map_err(|e| CliError::usage(e.to_string()))?;
            cells.push(spec);
        }
    }
    // Every cell reuses the same trial seeds, so levels differ only in magnitude.
    let mut seeder = SeededRng::derive(rc.seed, PERTURB_STREAM);
    let trial_seeds: Vec<u64> = (0..trials).map(|_| rand::RngCore::next_u64(&mut seeder)).collect();

    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| trial_seeds.iter().map(move |&s| (c, s)))
        .collect();
    let t0 = Instant::now();
    let results: Vec<EvalMetrics> = jobs
        .par_iter()
        .map(|&(c, s)| {
            let data = perturb_dataset(&test, &cells[c], s)?;
            evaluate(&ck.net, &data, cfg.timesteps, merged)
        })
        .collect::<Result<_, _>>()?;
    let wall = t0.elapsed().as_secs_f64() / cells.len().max(1) as f64;

    let id = run_id("robustness", rc.hash(), rc.seed);
    let base = RowBase { run_id: &id, command: "robustness", mode: cfg.lambda_mode.name(), seed: rc.seed };
    let mut rows = Vec::new();
    for (c, spec) in cells.iter().enumerate() {
        let cell = &results[c * trials..(c + 1) * trials];
        let (acc, sd) = mean_sd(&cell.iter().map(|m| m.accuracy).collect::<Vec<_>>());
        let (loss, _) = mean_sd(&cell.iter().map(|m| m.loss).collect::<Vec<_>>());
        let mut r = base.row("test", inference_name(merged), &ck.net, ck.epoch as usize, loss, acc);
        r.kind = spec.kind.name().into();
        r.level = spec.level;
        r.accuracy_sd = sd;
        r.wall_seconds = wall;
        println!("{} {}: accuracy {:.4} ± {:.4}", spec.kind.name(), spec.level, acc, sd);
        rows.push(r);
    }
    metrics::write(&out_dir.join("metrics-robustness.csv"), &rows)
}

pub fn ablate(config: &Path, seed: Option<u64>, out_dir: &Path, n_seeds: usize) -> Result<(), CliError> {
    if n_seeds == 0 {
        return Err(CliError::usage("--seeds must be >= 1"));
    }
    let rc = load_config(config, seed)?;
    let mut cfg = rc.train_config()?;
    cfg.frozen_lambda = None;
    let (train, _) = rc.load_data()?;
    prepare_out_dir(out_dir)?;
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|k| rc.seed + k).collect();
    let t0 = Instant::now();
    let report = ablate_lambda(&cfg, &train, &seeds)?;
    let wall = t0.elapsed().as_secs_f64();
    let id = run_id("ablate", rc.hash(), rc.seed);

    let row = |mode: &str, seed: u64, m: &EpochMetrics, sd: f64| MetricsRow {
        run_id: id.clone(),
        command: "ablate".into(),
        split: "train".into(),
        mode: mode.into(),
        inference: "plastic".into(),
        kind: "clean".into(),
        level: 0.0,
        epoch: m.epoch,
        seed,
        loss: m.loss,
        accuracy: m.accuracy,
        accuracy_sd: sd,
        lambda: format_lambda(&m.lambda),
        lambda_f: m.lambda_f,
        lambda_p: m.lambda_p,
        wall_seconds: wall,
    };
    let mut mean_rows = Vec::new();
    for mode in ABLATION_MODES {
        for (e, m) in report.mean_curve(mode).iter().enumerate() {
            let accs: Vec<f64> = report
                .runs
                .iter()
                .filter(|r| r.mode == mode)
                .map(|r| r.epochs[e].accuracy)
                .collect();
            mean_rows.push(row(mode.name(), rc.seed, m, mean_sd(&accs).1));
        }
    }
    let run_rows: Vec<MetricsRow> = report
        .runs
        .iter()
        .flat_map(|r| r.epochs.iter().map(|m| row(r.mode.name(), r.seed, m, 0.0)).collect::<Vec<_>>())
        .collect();
    metrics::write(&out_dir.join("metrics-ablate.csv"), &mean_rows)?;
    metrics::write(&out_dir.join("metrics-ablate-runs.csv"), &run_rows)?;

    let mut summary = String::new();
    for mode in ABLATION_MODES {
        summary.push_str(&format!("{} final_train_accuracy {}\n", mode.name(), report.final_accuracy(mode)));
    }
    summary.push_str(&format!("learnable_ge_fixed {}\n", report.learnable_beats_fixed()));
    write_atomic(&out_dir.join("ablate-summary.txt"), summary.as_bytes())
        .map_err(|e| CliError::io(e.to_string()))?;
    print!("{summary}");
    Ok(())
}

pub fn gradcheck(seed: u64, trials: usize, corrupt: bool) -> Result<(), CliError> {
    if trials == 0 {
        return Err(CliError::usage("--trials must be >= 1"));
    }
    let report = run_gradcheck(seed, trials, corrupt)?;
    for (group, err) in &report.group_max {
        println!("{group:>9}  max relative error {err:.3e}");
    }
    if let Some(w) = &report.worst {
        println!(
            "worst: trial {} (seed {}) {} tape {:e} reference {:e} rel {:.3e}",
            w.trial, w.seed, w.name, w.tape, w.reference, w.error
        );
    }
    match &report.first_failure {
        None => {
            println!("gradcheck passed: {trials} trials within {GRADCHECK_TOLERANCE:e}");
            Ok(())
        }
        Some(f) => Err(CliError::check(format!(
            "gradient mismatch in trial {} (seed {}): {} tape {:e} vs reference {:e}, relative error {:.3e}",
            f.trial, f.seed, f.name, f.tape, f.reference, f.error
        ))),
    }
}

pub fn export_features(
    config: &Path,
    seed: Option<u64>,
    out_dir: &Path,
    checkpoint: &Path,
    n_samples: usize,
) -> Result<(), CliError> {
    let rc = load_config(config, seed)?;
    let cfg = rc.train_config()?;
    let (_, test) = rc.load_data()?;
    let ck = load_checkpoint(checkpoint, &rc, &test)?;
    if ck.net.layers.len() < 2 {
        return Err(CliError::usage("feature export needs at least one hidden layer"));
    }
    let n = if n_samples > test.len() {
        eprintln!("warning: --n-samples {n_samples} exceeds the test split; exporting {}", test.len());
        test.len()
    } else {
        n_samples
    };
    prepare_out_dir(out_dir)?;
    let (x, labels) = test.batch(&(0..n).collect::<Vec<_>>());
    let inf = infer_batch(&ck.net, &x, cfg.timesteps, PathMode::Merged)?;
    let feats = &inf.final_u[ck.net.layers.len() - 2];

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["label".to_string()];
    header.extend((0..feats.cols()).map(|j| format!("u{j}")));
    let csv_err = |e: csv::Error| CliError::io(format!("features: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for (b, y) in labels.iter().enumerate() {
        let mut rec = vec![y.to_string()];
        rec.extend(feats.row(b).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::io(format!("features: {e}")))?;
    let path = out_dir.join("features.csv");
    write_atomic(&path, &bytes).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    println!("wrote {n} rows x {} features to {}", feats.cols(), path.display());
    Ok(())
}
