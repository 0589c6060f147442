//! Streaming cost measurements and component ablations.

use std::time::Instant;

use serde::Serialize;

use crate::config::{AblationFlags, RunConfig};
use crate::error::{HierarqError, Result};
use crate::memory::{Granularity, UpdatePolicy};
use crate::model::HierarQ;
use crate::prompt::build_prompt_bundle;
use crate::synthetic::SyntheticTask;
use crate::tensor::Scalar;
use crate::train::{model_for, run_lexicon, train, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchRow {
    pub frames: usize,
    /// Largest live state (bank and output floats) seen during the stream.
    pub peak_state_floats: usize,
    /// Closed-form bound on the live state for this configuration.
    pub closed_form_floats: usize,
    pub wall_time_s: f64,
    /// Output tokens handed to the decoder head.
    pub tokens_to_decoder: usize,
}

/// Stream `frame_counts[i]` synthetic frames through a fresh state each,
/// generating frames lazily so input size never grows with `T`.
pub fn bench<T: Scalar>(cfg: &RunConfig, frame_counts: &[usize]) -> Result<Vec<BenchRow>> {
    if frame_counts.is_empty() || frame_counts.contains(&0) {
        return Err(HierarqError::Config("frame counts must be positive".into()));
    }
    if frame_counts.windows(2).any(|w| w[0] > w[1]) {
        return Err(HierarqError::Config(format!("frame counts {frame_counts:?} must be ascending")));
    }
    let model: HierarQ<T> = model_for(cfg)?;
    let task = SyntheticTask::new(&cfg.synthetic, &cfg.model)?;
    let bundle = build_prompt_bundle::<T>(&cfg.prompt, &run_lexicon(cfg)?, &cfg.model)?;
    frame_counts
        .iter()
        .map(|&t| {
            let start = Instant::now();
            let out = model.process_video(task.frames::<T>(t, cfg.seed), &bundle)?;
            Ok(BenchRow {
                frames: t,
                peak_state_floats: out.peak_live_floats,
                closed_form_floats: model.arch.state_bound(),
                wall_time_s: start.elapsed().as_secs_f64(),
                tokens_to_decoder: out.scene.rows(),
            })
        })
        .collect()
}

/// Least-squares line `y = slope·x + intercept` and its R².
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    (slope, intercept, r2)
}

/// Named ablation setting relative to `base`.
#[derive(Debug, Clone)]
pub struct Ablation {
    pub name: &'static str,
    pub flags: AblationFlags,
}

/// Every ablation row: memory components, update policies, hierarchy,
/// compression granularity, and modulators. `fifo_mbc` is `base` itself.
pub fn ablation_settings(base: &AblationFlags) -> Vec<Ablation> {
    let with = |f: &dyn Fn(&mut AblationFlags)| {
        let mut flags = base.clone();
        f(&mut flags);
        flags
    };
    let row = |name, flags| Ablation { name, flags };
    vec![
        row("fifo_mbc", base.clone()),
        row(
            "no_memory",
            with(&|f| {
                f.short_visual_memory = false;
                f.short_query_memory = false;
                f.long_visual_memory = false;
                f.long_query_memory = false;
            }),
        ),
        row(
            "visual_only",
            with(&|f| {
                f.short_query_memory = false;
                f.long_query_memory = false;
            }),
        ),
        row(
            "query_only",
            with(&|f| {
                f.short_visual_memory = false;
                f.long_visual_memory = false;
            }),
        ),
        row(
            "short_only",
            with(&|f| {
                f.long_visual_memory = false;
                f.long_query_memory = false;
            }),
        ),
        row(
            "long_only",
            with(&|f| {
                f.short_visual_memory = false;
                f.short_query_memory = false;
            }),
        ),
        row(
            "fifo_fifo",
            with(&|f| {
                f.short_policy = UpdatePolicy::Fifo;
                f.long_policy = UpdatePolicy::Fifo;
            }),
        ),
        row(
            "mbc_mbc",
            with(&|f| {
                f.short_policy = UpdatePolicy::Mbc;
                f.long_policy = UpdatePolicy::Mbc;
            }),
        ),
        row("no_hierarchy", with(&|f| f.disable_hierarchical_link = true)),
        row("token_level_mbc", with(&|f| f.compression_granularity = Granularity::Token)),
        row("frame_level_mbc", with(&|f| f.compression_granularity = Granularity::Frame)),
        row("no_entity_modulator", with(&|f| f.disable_entity_stream = true)),
        row("no_scene_modulator", with(&|f| f.disable_scene_modulator = true)),
        row(
            "no_modulators",
            with(&|f| {
                f.disable_entity_stream = true;
                f.disable_scene_modulator = true;
            }),
        ),
    ]
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub is_default: bool,
    pub steps: usize,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub parameters: usize,
}

/// Train one model per selected setting on identical seeds and data.
/// `only` restricts the rows by name; the default row is always included.
pub fn ablate<T: Scalar>(
    cfg: &RunConfig,
    only: &[String],
    mut on_row: impl FnMut(&AblationRow),
) -> Result<Vec<AblationRow>> {
    let settings = ablation_settings(&cfg.flags);
    if let Some(unknown) = only.iter().find(|n| !settings.iter().any(|s| s.name == n.as_str())) {
        let names: Vec<_> = settings.iter().map(|s| s.name).collect();
        return Err(HierarqError::Config(format!(
            "unknown ablation {unknown:?}; expected one of {names:?}"
        )));
    }
    let mut rows = Vec::new();
    for s in settings {
        let is_default = s.name == "fifo_mbc";
        if !only.is_empty() && !is_default && !only.iter().any(|n| n == s.name) {
            continue;
        }
        let run = RunConfig {
            flags: s.flags.clone(),
            ..cfg.clone()
        };
        let mut model: HierarQ<T> = model_for(&run)?;
        let report: TrainReport = train(&run, &mut model, |_| {})?;
        let row = AblationRow {
            name: s.name.to_string(),
            is_default,
            steps: report.steps,
            val_loss: report.final_val_loss,
            val_accuracy: report.final_val_accuracy,
            parameters: report.parameters,
        };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}
