//! Model and run configuration. Config files are JSON; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{HierarqError, Result};
use crate::memory::{Granularity, MergeRule, UpdatePolicy};
use crate::synthetic::SyntheticTaskSpec;

/// Environment variable overriding the configured precision.
pub const PRECISION_ENV: &str = "HIERARQ_PRECISION";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = HierarqError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(HierarqError::Config(format!("unknown precision {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Visual tokens per frame.
    pub visual_tokens: usize,
    pub visual_dim: usize,
    /// Learnable query count, also the per-frame output token count.
    pub num_queries: usize,
    pub query_dim: usize,
    /// Transformer layers per query transformer.
    pub layers: usize,
    pub heads: usize,
    /// Cross-attention is present on layers where `layer % freq == 0`.
    pub cross_attn_frequency: usize,
    pub short_memory: usize,
    pub long_memory: usize,
    pub modulator_layers: usize,
    pub modulator_heads: usize,
    pub text_dim: usize,
    pub max_prompt_tokens: usize,
    /// Output classes of the classification head.
    pub num_classes: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small configuration that trains on a single CPU core.
    pub fn desk() -> Self {
        ModelConfig {
            visual_tokens: 16,
            visual_dim: 32,
            num_queries: 8,
            query_dim: 32,
            layers: 2,
            heads: 4,
            cross_attn_frequency: 2,
            short_memory: 10,
            long_memory: 10,
            modulator_layers: 2,
            modulator_heads: 8,
            text_dim: 32,
            max_prompt_tokens: 32,
            num_classes: 4,
            seed: 0,
            precision: Precision::F32,
        }
    }

    /// Published architecture sizes (ViT-g patch grid, BERT-base width).
    pub fn full_scale() -> Self {
        ModelConfig {
            visual_tokens: 257,
            visual_dim: 1408,
            num_queries: 32,
            query_dim: 768,
            layers: 12,
            heads: 12,
            cross_attn_frequency: 2,
            short_memory: 10,
            long_memory: 10,
            modulator_layers: 2,
            modulator_heads: 8,
            text_dim: 768,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("visual_tokens", self.visual_tokens),
            ("visual_dim", self.visual_dim),
            ("num_queries", self.num_queries),
            ("query_dim", self.query_dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("cross_attn_frequency", self.cross_attn_frequency),
            ("short_memory", self.short_memory),
            ("long_memory", self.long_memory),
            ("modulator_layers", self.modulator_layers),
            ("modulator_heads", self.modulator_heads),
            ("text_dim", self.text_dim),
            ("max_prompt_tokens", self.max_prompt_tokens),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(HierarqError::Config(format!("{name} must be at least 1")));
        }
        if self.query_dim % self.heads != 0 {
            return Err(HierarqError::Config(format!(
                "query_dim {} not divisible by heads {}",
                self.query_dim, self.heads
            )));
        }
        if self.visual_dim % self.modulator_heads != 0 {
            return Err(HierarqError::Config(format!(
                "visual_dim {} not divisible by modulator_heads {}",
                self.visual_dim, self.modulator_heads
            )));
        }
        Ok(())
    }

    pub fn is_cross_layer(&self, layer: usize) -> bool {
        layer % self.cross_attn_frequency == 0
    }
}

/// Component switches mirroring the ablation tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Bypass the entity-guided modulator (entity stream sees raw frames).
    pub disable_entity_stream: bool,
    pub disable_scene_modulator: bool,
    /// Drop the scene→entity cross-attention; the head then reads both
    /// query sets side by side.
    pub disable_hierarchical_link: bool,
    pub short_policy: UpdatePolicy,
    pub long_policy: UpdatePolicy,
    pub compression_granularity: Granularity,
    pub merge_rule: MergeRule,
    pub short_visual_memory: bool,
    pub short_query_memory: bool,
    pub long_visual_memory: bool,
    pub long_query_memory: bool,
    /// Place the two extra scene submodules on every layer instead of only
    /// on cross-attention layers.
    pub scene_submodules_all_layers: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            disable_entity_stream: false,
            disable_scene_modulator: false,
            disable_hierarchical_link: false,
            short_policy: UpdatePolicy::Fifo,
            long_policy: UpdatePolicy::Mbc,
            compression_granularity: Granularity::Token,
            merge_rule: MergeRule::Mean,
            short_visual_memory: true,
            short_query_memory: true,
            long_visual_memory: true,
            long_query_memory: true,
            scene_submodules_all_layers: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    #[default]
    EntityId,
    Forward,
    Bench,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub val_samples: usize,
    /// Stop once validation accuracy reaches this value.
    pub target_accuracy: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            step_size: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            steps: 2000,
            batch_size: 8,
            eval_every: 100,
            val_samples: 64,
            target_accuracy: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub flags: AblationFlags,
    pub task: Task,
    /// Data and training seed.
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub synthetic: SyntheticTaskSpec,
    pub prompt: String,
    /// Extra lexicon entries merged into the built-in list.
    pub lexicon: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Weights to load instead of a fresh initialisation.
    pub checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            flags: AblationFlags::default(),
            task: Task::EntityId,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            synthetic: SyntheticTaskSpec::default(),
            prompt: "which object appears in the video".into(),
            lexicon: None,
            output_dir: PathBuf::from("hierarq_out"),
            checkpoint: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file and apply environment overrides.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HierarqError::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(p) = std::env::var(PRECISION_ENV) {
            self.model.precision = p.parse()?;
        }
        Ok(())
    }

    /// Seed both data generation and weight initialisation.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synthetic.validate(&self.model)?;
        if self.optimizer.batch_size == 0 || self.optimizer.eval_every == 0 {
            return Err(HierarqError::Config("batch_size and eval_every must be positive".into()));
        }
        if !(self.optimizer.step_size > 0.0) {
            return Err(HierarqError::Config("step_size must be positive".into()));
        }
        if self.prompt.trim().is_empty() {
            return Err(HierarqError::Config("prompt must be non-empty".into()));
        }
        Ok(())
    }
}
