//! TOML run configuration. Every section is optional and unknown keys are
//! rejected.
//!
//! ```toml
//! seed = 7
//! stream = "mixed"
//!
//! [model.encoder]
//! k = 3
//! n_latents = 16
//! p_ld = 0.5
//!
//! [pretrain]
//! steps = 2000
//! adam = { lr = 2e-3 }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusConfig;
use crate::cost::{SweepSpec, SweepVariable};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::retrieval::StreamMode;
use crate::training::{AdamConfig, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneTask {
    Retrieval,
    Qa,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Retrieval corpus size C taken from the test split; 0 means all of it.
    pub corpus_size: usize,
    /// Use cached visual latents for multi/mixed retrieval.
    pub cache: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            corpus_size: 0,
            cache: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub variable: SweepVariable,
    pub grid: Vec<u64>,
    pub frames: u64,
    pub frame_size: u64,
    pub text_len: u64,
    /// 0 means `k·(1+l)`.
    pub baseline_depth: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            variable: SweepVariable::MFrames,
            grid: vec![1, 2, 4, 8],
            frames: 1,
            frame_size: 32,
            text_len: 16,
            baseline_depth: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub corpus_size: u64,
    pub runs: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            corpus_size: 64,
            runs: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Corpus directory written by `gen-data` and read by training and eval.
    pub data_dir: PathBuf,
    /// Checkpoint read by `finetune`, `eval-*` (and written by `train`).
    pub checkpoint: PathBuf,
    pub stream: StreamMode,
    pub task: FinetuneTask,
    /// Fixed number of active cross-attentions at inference; `None` = all.
    pub layerdrop_infer: Option<usize>,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_dir: PathBuf::from("data"),
            checkpoint: PathBuf::from("model.ckpt"),
            stream: StreamMode::Mixed,
            task: FinetuneTask::Retrieval,
            layerdrop_infer: None,
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            pretrain: TrainConfig::default(),
            finetune: TrainConfig {
                steps: 1000,
                batch: 16,
                negatives: 15,
                adam: AdamConfig {
                    lr: 5e-4,
                    ..AdamConfig::default()
                },
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if let Some(c) = self.layerdrop_infer {
            if c < 1 || c > self.model.encoder.k {
                return Err(Error::Config(format!(
                    "layerdrop_infer={c} outside 1..={}",
                    self.model.encoder.k
                )));
            }
        }
        if self.corpus.image_size % self.model.embed.patch != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch {}",
                self.corpus.image_size, self.model.embed.patch
            )));
        }
        Ok(())
    }

    pub fn sweep_spec(&self) -> SweepSpec {
        let s = &self.sweep;
        SweepSpec {
            variable: s.variable,
            grid: s.grid.clone(),
            model: self.model.clone(),
            frames: s.frames,
            frame_size: s.frame_size,
            text_len: s.text_len,
            baseline_depth: s.baseline_depth,
        }
    }
}
