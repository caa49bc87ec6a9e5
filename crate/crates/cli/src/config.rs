//! Experiment configuration: a strict TOML file with dotted sections and a
//! documented default for every field. Unknown keys are an error — a config
//! that parses is a config that does what it says.
//!
//! Field defaults (also what an empty file means):
//!
//! ```toml
//! seed = 0
//!
//! [model]
//! num_layers = 2          # encoder blocks
//! d_model = 16            # feature width (divisible by num_heads)
//! num_heads = 2
//! ffn_dim = 32
//! norm = "ln"             # ln | bn | rbn | brn
//! placement = "pre"       # pre | post
//! # mixed_norm = 2        # bottom blocks using `norm`; default: all blocks
//! dropout = 0.0
//!
//! [task]
//! kind = "copy"           # copy | parity | char-lm
//! min_len = 5
//! max_len = 8
//! vocab = 16              # forced to 2 by parity
//! train_size = 512
//! valid_size = 128
//!
//! [optim]
//! base_lr = 0.003
//! warmup_steps = 200
//! max_steps = 2000
//! batch_size = 16
//!
//! [norm]
//! alpha = 0.1             # EMA weight on the newest batch statistics
//! eps = 1e-5
//! lambda = 0.0            # penalty weight on mean discrepancy
//! nu = 0.0                # penalty weight on std discrepancy
//! brn_warmup = 500        # renorm: pure-BN steps before the ramp
//! brn_ramp = 1000         # renorm: steps to reach the caps
//! brn_r_cap = 3.0
//! brn_d_cap = 5.0
//!
//! [measure]
//! cond_every = 50         # conditioning cadence in steps; 0 disables
//! eval_batch = 64         # chunk size for evaluation passes
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use normbench_core::model::{ModelConfig, NormPlacement};
use normbench_core::norm::{BrnSchedule, NormKind, RegularizerConfig};
use normbench_core::task::{TaskKind, TaskSpec};
use normbench_core::train::OptimConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config invalid: {0}")]
    Invalid(String),
    #[error("config file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub task: TaskSection,
    pub optim: OptimSection,
    pub norm: NormSection,
    pub measure: MeasureSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub norm: String,
    pub placement: String,
    /// Bottom blocks whose norm sites use `norm`; `None` means all of them.
    pub mixed_norm: Option<usize>,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub kind: String,
    pub min_len: usize,
    pub max_len: usize,
    pub vocab: usize,
    pub train_size: usize,
    pub valid_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSection {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub max_steps: u64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormSection {
    pub alpha: f64,
    pub eps: f64,
    pub lambda: f64,
    pub nu: f64,
    pub brn_warmup: u64,
    pub brn_ramp: u64,
    pub brn_r_cap: f64,
    pub brn_d_cap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeasureSection {
    pub cond_every: u64,
    pub eval_batch: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            model: ModelSection::default(),
            task: TaskSection::default(),
            optim: OptimSection::default(),
            norm: NormSection::default(),
            measure: MeasureSection::default(),
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            num_layers: 2,
            d_model: 16,
            num_heads: 2,
            ffn_dim: 32,
            norm: "ln".into(),
            placement: "pre".into(),
            mixed_norm: None,
            dropout: 0.0,
        }
    }
}

impl Default for TaskSection {
    fn default() -> Self {
        TaskSection {
            kind: "copy".into(),
            min_len: 5,
            max_len: 8,
            vocab: 16,
            train_size: 512,
            valid_size: 128,
        }
    }
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection { base_lr: 3e-3, warmup_steps: 200, max_steps: 2000, batch_size: 16 }
    }
}

impl Default for NormSection {
    fn default() -> Self {
        NormSection {
            alpha: 0.1,
            eps: 1e-5,
            lambda: 0.0,
            nu: 0.0,
            brn_warmup: 500,
            brn_ramp: 1000,
            brn_r_cap: 3.0,
            brn_d_cap: 5.0,
        }
    }
}

impl Default for MeasureSection {
    fn default() -> Self {
        MeasureSection { cond_every: 50, eval_batch: 64 }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validated()
    }

    pub fn from_file(path: &str) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::from_toml(&text)
    }

    fn validated(self) -> Result<Self, ConfigError> {
        self.validate()?;
        Ok(self)
    }

    /// Checks the cross-field constraints. Run again after mutating a parsed
    /// config (presets, flag overrides).
    pub fn validate(&self) -> Result<(), ConfigError> {
        // Kinds and placements are checked here so a bad config dies before
        // any work; numeric ranges are re-checked by the core constructors.
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if NormKind::parse(&self.model.norm).is_none() {
            return bad(format!("model.norm `{}` (expected ln|bn|rbn|brn)", self.model.norm));
        }
        if NormPlacement::parse(&self.model.placement).is_none() {
            return bad(format!("model.placement `{}` (expected pre|post)", self.model.placement));
        }
        if TaskKind::parse(&self.task.kind).is_none() {
            return bad(format!("task.kind `{}` (expected copy|parity|char-lm)", self.task.kind));
        }
        if self.optim.batch_size == 0 || self.optim.max_steps == 0 {
            return bad("optim.batch_size and optim.max_steps must be positive".into());
        }
        if self.measure.eval_batch == 0 {
            return bad("measure.eval_batch must be positive".into());
        }
        if self.norm.lambda < 0.0 || self.norm.nu < 0.0 {
            return bad("norm.lambda and norm.nu must be nonnegative".into());
        }
        Ok(())
    }

    /// The task spec this config describes. Parity is a binary task, so its
    /// vocabulary is pinned to 2 no matter what the file says.
    pub fn task_spec(&self) -> TaskSpec {
        let kind = TaskKind::parse(&self.task.kind).expect("validated");
        TaskSpec {
            kind,
            min_len: self.task.min_len,
            max_len: self.task.max_len,
            vocab: if kind == TaskKind::Parity { 2 } else { self.task.vocab },
            train_size: self.task.train_size,
            valid_size: self.task.valid_size,
        }
    }

    /// The model config this file describes; vocabulary, class count, and
    /// sequence length follow the task.
    pub fn model_config(&self) -> ModelConfig {
        let task = self.task_spec();
        let num_classes = if task.kind == TaskKind::Parity { 2 } else { task.vocab };
        ModelConfig {
            num_layers: self.model.num_layers,
            d_model: self.model.d_model,
            num_heads: self.model.num_heads,
            ffn_dim: self.model.ffn_dim,
            norm_kind: NormKind::parse(&self.model.norm).expect("validated"),
            placement: NormPlacement::parse(&self.model.placement).expect("validated"),
            mixed_norm_count: self.model.mixed_norm.unwrap_or(self.model.num_layers),
            vocab: task.vocab,
            num_classes,
            max_len: task.max_len,
            momentum: self.norm.alpha,
            eps: self.norm.eps,
            brn: BrnSchedule::new(
                self.norm.brn_warmup,
                self.norm.brn_ramp,
                self.norm.brn_r_cap,
                self.norm.brn_d_cap,
            ),
            dropout: self.model.dropout,
        }
    }

    pub fn optim_config(&self) -> OptimConfig {
        OptimConfig {
            base_lr: self.optim.base_lr,
            warmup_steps: self.optim.warmup_steps,
            ..OptimConfig::default()
        }
    }

    pub fn regularizer(&self) -> RegularizerConfig {
        RegularizerConfig::new(self.norm.lambda, self.norm.nu)
    }

    /// A short stable identity for the configuration. Computed from the
    /// parsed struct serialized in declaration order, so reordering keys in
    /// the file cannot change it.
    pub fn hash(&self) -> String {
        let canon = toml::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(canon.as_bytes()))
    }
}

/// FNV-1a, 64-bit: tiny, stable, good enough for config identity tags.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
