//! Batch driver: generate synthetic drift benchmarks, run continual
//! training with ablations and parameter sweeps, and evaluate checkpoints.
//!
//! Every run writes a manifest (config snapshot, seed, dataset hash, output
//! paths, wall clock) under the output directory; existing manifests are
//! never overwritten. Exit codes: 0 ok, 2 validation, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use infgnn::dataset::{load_dataset, write_dataset};
use infgnn::error::Error;
use infgnn::eval::{
    append_metrics_csv, evaluate_on_interval, render_summary, run_ablations, run_sweep,
    AblationTag, MetricRecord, SweepParam,
};
use infgnn::graph::node_churn;
use infgnn::model::{load_checkpoint, save_checkpoint, NormStats};
use infgnn::ri::write_ri_scores_csv;
use infgnn::synth::{generate_synthetic_drift, SynthConfig};
use infgnn::trainer::{run_continual, TrainConfig};

#[derive(Parser)]
#[command(name = "infgnn", version, about = "Continual spatio-temporal forecasting under data drift")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic drift dataset plus its ground-truth log.
    Generate {
        /// JSON generator config; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train continually over a dataset and evaluate each next interval.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// JSON training config; published defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Run one ablation arm: wo_sg, wo_ifg, wo_mb, wo_ifs, wo_ris.
        #[arg(long)]
        ablation: Option<String>,
        /// Sweep one parameter, e.g. --sweep lambda_ris=0.25,0.5,1.0 or
        /// --sweep buffer_size=800,1000,1200.
        #[arg(long)]
        sweep: Option<String>,
    },
    /// Evaluate a checkpoint on interval t+1 given interval t.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Training-side interval t (0-based); evaluation runs on t+1.
        #[arg(long)]
        interval: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(serde::Serialize)]
struct RunManifest {
    command: String,
    config: serde_json::Value,
    seed: u64,
    code_version: String,
    dataset_hash: Option<String>,
    output_paths: Vec<String>,
    wall_clock_secs: f64,
}

fn hash_directory(root: &Path) -> Result<String, Error> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push(path);
            }
        }
    }
    files.sort();
    let mut hasher = Sha256::new();
    for file in files {
        let rel = file.strip_prefix(root).unwrap_or(&file);
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0u8]);
        hasher.update(std::fs::read(&file)?);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

/// Write the run manifest without clobbering earlier ones.
fn write_manifest(out: &Path, manifest: &RunManifest) -> Result<PathBuf, Error> {
    std::fs::create_dir_all(out)?;
    let mut path = out.join("manifest.json");
    let mut counter = 1;
    while path.exists() {
        path = out.join(format!("manifest.{counter}.json"));
        counter += 1;
    }
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Format(format!("cannot serialize manifest: {e}")))?;
    std::fs::write(&path, json + "\n")?;
    Ok(path)
}

fn load_json_config<T: serde::de::DeserializeOwned + Default>(
    path: Option<&PathBuf>,
) -> Result<T, Error> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let raw = std::fs::read_to_string(p).map_err(|e| {
                Error::Format(format!("cannot read config {}: {e}", p.display()))
            })?;
            serde_json::from_str(&raw).map_err(|e| Error::Config(format!("bad config: {e}")))
        }
    }
}

fn cmd_generate(config: Option<PathBuf>, out: PathBuf, seed: u64) -> Result<(), Error> {
    let start = Instant::now();
    let cfg: SynthConfig = load_json_config(config.as_ref())?;
    let (seq, truth) = generate_synthetic_drift(&cfg, seed)?;
    write_dataset(&seq, &out)?;
    let truth_path = out.join("synth_truth.json");
    let truth_json = serde_json::to_string_pretty(&truth)
        .map_err(|e| Error::Format(format!("cannot serialize ground truth: {e}")))?;
    std::fs::write(&truth_path, truth_json + "\n")?;
    let manifest = RunManifest {
        command: "generate".into(),
        config: serde_json::to_value(&cfg).unwrap_or_default(),
        seed,
        code_version: env!("CARGO_PKG_VERSION").into(),
        dataset_hash: Some(hash_directory(&out)?),
        output_paths: vec![out.display().to_string()],
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    write_manifest(&out, &manifest)?;
    println!(
        "generated {} intervals ({} -> {} nodes) under {}",
        seq.len(),
        seq.interval(0).0.node_count(),
        seq.interval(seq.len() - 1).0.node_count(),
        out.display()
    );
    Ok(())
}

fn parse_sweep(spec: &str) -> Result<(SweepParam, Vec<f64>), Error> {
    let (name, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("sweep spec {spec:?} must be param=v1,v2,...")))?;
    let param: SweepParam = name.parse()?;
    let values: Vec<f64> = values
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("bad sweep value {v:?}: {e}")))
        })
        .collect::<Result<_, _>>()?;
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    Ok((param, values))
}

fn cmd_train(
    dataset: PathBuf,
    config: Option<PathBuf>,
    out: PathBuf,
    seed: Option<u64>,
    ablation: Option<String>,
    sweep: Option<String>,
) -> Result<(), Error> {
    let start = Instant::now();
    let mut cfg: TrainConfig = load_json_config(config.as_ref())?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let echo = serde_json::to_string(&cfg)
        .map_err(|e| Error::Format(format!("cannot echo config: {e}")))?;
    println!("effective config: {echo}");
    let seq = load_dataset(&dataset)?;
    std::fs::create_dir_all(&out)?;

    let mut output_paths = Vec::new();
    let metrics_path = out.join("metrics.csv");
    let records: Vec<MetricRecord> = match (&ablation, &sweep) {
        (Some(tag), None) => {
            let tag: AblationTag = tag.parse()?;
            run_ablations(&seq, &cfg, &[tag])?
        }
        (None, Some(spec)) => {
            let (param, values) = parse_sweep(spec)?;
            run_sweep(&seq, &cfg, param, &values)?
        }
        (None, None) => {
            let outcome = run_continual(&seq, &cfg, "inf_gnn")?;
            // Per-interval exports: checkpoint, RI scores, buffer history.
            let ckpt_path = out.join("checkpoint.ckpt");
            save_checkpoint(
                &outcome.final_state,
                outcome.norm.mean,
                outcome.norm.std,
                &ckpt_path,
            )?;
            output_paths.push(ckpt_path.display().to_string());
            let mut buffer_rows: Vec<(usize, String, f64)> = Vec::new();
            for report in &outcome.reports {
                if let Some(table) = &report.ri_table {
                    let path = out.join(format!("ri_scores_t{}.csv", report.interval));
                    write_ri_scores_csv(table, &path)?;
                    output_paths.push(path.display().to_string());
                }
                for (epoch, entries) in &report.buffer_history {
                    let global_epoch = report.interval * cfg.epochs + epoch;
                    for (ts, score) in entries {
                        buffer_rows.push((global_epoch, ts.to_string(), *score));
                    }
                }
            }
            if !buffer_rows.is_empty() {
                let path = out.join("buffer_history.csv");
                let mut writer = csv::Writer::from_path(&path)
                    .map_err(|e| Error::Io(std::io::Error::other(e)))?;
                writer
                    .write_record(["epoch", "timestamp", "score"])
                    .map_err(|e| Error::Io(std::io::Error::other(e)))?;
                for (epoch, ts, score) in &buffer_rows {
                    writer
                        .write_record([epoch.to_string(), ts.clone(), score.to_string()])
                        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
                }
                writer
                    .flush()
                    .map_err(|e| Error::Io(std::io::Error::other(e)))?;
                output_paths.push(path.display().to_string());
            }
            outcome.records
        }
        (Some(_), Some(_)) => {
            return Err(Error::Config(
                "--ablation and --sweep cannot be combined".into(),
            ))
        }
    };

    append_metrics_csv(&records, &metrics_path)?;
    output_paths.push(metrics_path.display().to_string());
    print!("{}", render_summary(&records));

    let mut config_value = serde_json::to_value(&cfg).unwrap_or_default();
    if let Some(tag) = &ablation {
        config_value["ablation"] = serde_json::Value::String(tag.clone());
    }
    if let Some(spec) = &sweep {
        config_value["sweep"] = serde_json::Value::String(spec.clone());
    }
    let manifest = RunManifest {
        command: "train".into(),
        config: config_value,
        seed: cfg.seed,
        code_version: env!("CARGO_PKG_VERSION").into(),
        dataset_hash: Some(hash_directory(&dataset)?),
        output_paths,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    write_manifest(&out, &manifest)?;
    Ok(())
}

fn cmd_evaluate(
    checkpoint: PathBuf,
    dataset: PathBuf,
    interval: usize,
    out: PathBuf,
) -> Result<(), Error> {
    let start = Instant::now();
    let (state, header) = load_checkpoint(&checkpoint)?;
    let seq = load_dataset(&dataset)?;
    if interval + 1 >= seq.len() {
        return Err(Error::Argument(format!(
            "interval {interval} has no successor in a {}-interval dataset",
            seq.len()
        )));
    }
    if seq.feature_dim() != header.dims.feature_dim {
        return Err(Error::Validation(format!(
            "checkpoint expects feature dimension {}, dataset has {}",
            header.dims.feature_dim,
            seq.feature_dim()
        )));
    }
    let cfg = TrainConfig {
        input_steps: header.dims.input_steps,
        output_steps: header.dims.output_steps,
        hidden: header.dims.hidden,
        conv_width: header.dims.conv_width,
        ..TrainConfig::default()
    };
    let norm = NormStats {
        mean: header.norm_mean,
        std: header.norm_std,
    };
    let churn = node_churn(&seq.interval(interval).0, &seq.interval(interval + 1).0);
    let records = evaluate_on_interval(
        &state,
        seq.interval(interval + 1),
        &churn,
        &cfg,
        &norm,
        "evaluate",
    )?;
    std::fs::create_dir_all(&out)?;
    let metrics_path = out.join("metrics.csv");
    append_metrics_csv(&records, &metrics_path)?;
    print!("{}", render_summary(&records));
    let manifest = RunManifest {
        command: "evaluate".into(),
        config: serde_json::json!({
            "checkpoint": checkpoint.display().to_string(),
            "interval": interval,
        }),
        seed: 0,
        code_version: env!("CARGO_PKG_VERSION").into(),
        dataset_hash: Some(hash_directory(&dataset)?),
        output_paths: vec![metrics_path.display().to_string()],
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    write_manifest(&out, &manifest)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate { config, out, seed } => cmd_generate(config, out, seed),
        Command::Train {
            dataset,
            config,
            out,
            seed,
            ablation,
            sweep,
        } => cmd_train(dataset, config, out, seed, ablation, sweep),
        Command::Evaluate {
            checkpoint,
            dataset,
            interval,
            out,
        } => cmd_evaluate(checkpoint, dataset, interval, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numerical(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
