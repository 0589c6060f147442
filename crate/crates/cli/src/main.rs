//! `hierarq` command-line tool.
//!
//! Exit codes: 0 success, 1 input or configuration error, 2 numerical
//! failure. Failures print one JSON object on stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use hierarq::bench::{ablate, bench, linear_fit};
use hierarq::config::{Precision, RunConfig};
use hierarq::container::{load_checkpoint, read_features, save_checkpoint, write_features};
use hierarq::model::HierarQ;
use hierarq::prompt::build_prompt_bundle;
use hierarq::synthetic::SyntheticTask;
use hierarq::train::{model_for, run_lexicon, train};
use hierarq::{HierarqError, Result, Scalar};

#[derive(Parser)]
#[command(name = "hierarq", version, about = "Task-aware streaming video understanding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Process a feature container and report the prediction.
    Run {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        prompt: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Weights to load; overrides the config's checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train on the synthetic entity task.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Measure live state and latency against stream length.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "100,1000,10000")]
        frames: Vec<usize>,
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train every ablation row on identical data and tabulate the results.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Rows to run besides the default (all when omitted).
        #[arg(long, value_delimiter = ',')]
        flags: Vec<String>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write a synthetic stream as a feature container.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => {
            let mut cfg = RunConfig::default();
            cfg.apply_env()?;
            Ok(cfg)
        }
    }
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let csv_err = |e: csv::Error| HierarqError::Input(format!("writing {}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| HierarqError::io(path, e))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| HierarqError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| HierarqError::io(path, e))
}

fn run_features<T: Scalar>(
    cfg: &RunConfig,
    features: &Path,
    prompt: &str,
    checkpoint: Option<&Path>,
) -> Result<serde_json::Value> {
    let model: HierarQ<T> = match checkpoint.or(cfg.checkpoint.as_deref()) {
        Some(p) => load_checkpoint(p)?,
        None => model_for(cfg)?,
    };
    let frames = read_features::<T>(features)?;
    let bundle = build_prompt_bundle::<T>(prompt, &run_lexicon(cfg)?, model.cfg())?;
    let out = model.process_video(&frames, &bundle)?;
    let logits: Vec<f64> = model.logits(&out)?.iter().map(|v| v.as_f64()).collect();
    let label = logits
        .iter()
        .enumerate()
        .fold(0, |best, (i, v)| if *v > logits[best] { i } else { best });
    let embedding: Vec<Vec<f64>> = (0..out.scene.rows())
        .map(|r| out.scene.row(r).iter().map(|v| v.as_f64()).collect())
        .collect();
    Ok(json!({
        "frames": out.frames,
        "precision": T::NAME,
        "entities": bundle.entity_tokens,
        "entity_fallback": bundle.entity_fallback(),
        "warnings": bundle.warnings,
        "predicted_label": label,
        "logits": logits,
        "embedding": embedding,
        "gates": out.gates,
    }))
}

fn train_run<T: Scalar>(cfg: &RunConfig) -> Result<()> {
    create_dir(&cfg.output_dir)?;
    let mut model: HierarQ<T> = match &cfg.checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => model_for(cfg)?,
    };
    let report = train(cfg, &mut model, |p| {
        eprintln!(
            "step {:>5}  train {:.4}  val {:.4}  acc {:.3}",
            p.step, p.train_loss, p.val_loss, p.val_accuracy
        );
    })?;
    let stem = format!("train_seed{}", cfg.seed);
    write_csv(&cfg.output_dir.join(format!("{stem}.csv")), &report.curve)?;
    let ckpt = cfg.output_dir.join(format!("{stem}.hqf"));
    save_checkpoint(&ckpt, &model)?;
    let summary = json!({
        "seed": report.seed,
        "steps": report.steps,
        "final_val_loss": report.final_val_loss,
        "final_val_accuracy": report.final_val_accuracy,
        "reached_target_at": report.reached_target_at,
        "oracle_accuracy": report.oracle_accuracy,
        "parameters": report.parameters,
        "precision": T::NAME,
        "checkpoint": ckpt,
    });
    write_json(&cfg.output_dir.join(format!("{stem}.json")), &summary)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn bench_run<T: Scalar>(cfg: &RunConfig, frames: &[usize], csv: &Path) -> Result<()> {
    let rows = bench::<T>(cfg, frames)?;
    write_csv(csv, &rows)?;
    let xs: Vec<f64> = rows.iter().map(|r| r.frames as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.wall_time_s).collect();
    let fit = (rows.len() >= 2).then(|| linear_fit(&xs, &ys));
    println!(
        "{}",
        json!({
            "rows": rows.len(),
            "closed_form_floats": rows[0].closed_form_floats,
            "latency_slope_s_per_frame": fit.map(|f| f.0),
            "latency_r2": fit.map(|f| f.2),
        })
    );
    Ok(())
}

fn ablate_run<T: Scalar>(cfg: &RunConfig, only: &[String], csv: Option<&Path>) -> Result<()> {
    let rows = ablate::<T>(cfg, only, |r| {
        eprintln!("{:<22} acc {:.3}  loss {:.4}", r.name, r.val_accuracy, r.val_loss);
    })?;
    let path = match csv {
        Some(p) => p.to_path_buf(),
        None => {
            create_dir(&cfg.output_dir)?;
            cfg.output_dir.join("ablate.csv")
        }
    };
    write_csv(&path, &rows)?;
    println!("{}", json!({ "rows": rows.len(), "csv": path }));
    Ok(())
}

fn synth<T: Scalar>(cfg: &RunConfig, out: &Path, seed: u64) -> Result<()> {
    let task = SyntheticTask::new(&cfg.synthetic, &cfg.model)?;
    let sample = task.dataset::<T>(1, seed).remove(0);
    write_features(out, &sample.frames)?;
    println!(
        "{}",
        json!({ "frames": sample.frames.len(), "label": sample.label, "out": out })
    );
    Ok(())
}

macro_rules! with_precision {
    ($cfg:expr, $f:ident($($arg:expr),*)) => {
        match $cfg.model.precision {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            features,
            prompt,
            config,
            out,
            checkpoint,
        } => {
            let cfg = load_config(config.as_deref())?;
            let prompt = prompt.unwrap_or_else(|| cfg.prompt.clone());
            let report = with_precision!(cfg, run_features(&cfg, &features, &prompt, checkpoint.as_deref()))?;
            write_json(&out, &report)
        }
        Command::Train { config, seed } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg = cfg.with_seed(s);
            }
            with_precision!(cfg, train_run(&cfg))
        }
        Command::Bench { frames, csv, config } => {
            let cfg = load_config(config.as_deref())?;
            with_precision!(cfg, bench_run(&cfg, &frames, &csv))
        }
        Command::Ablate { config, flags, csv } => {
            let cfg = load_config(config.as_deref())?;
            with_precision!(cfg, ablate_run(&cfg, &flags, csv.as_deref()))
        }
        Command::Synth { out, config, seed } => {
            let cfg = load_config(config.as_deref())?;
            with_precision!(cfg, synth(&cfg, &out, seed))
        }
    }
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    eprintln!("{}", json!({ "error": kind, "message": message }));
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string().trim(), 1),
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string(), e.exit_code() as u8),
    }
}
