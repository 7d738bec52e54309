//! Run configuration, read from TOML with command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::DecodeOptions;
use crate::model::ModelConfig;
use crate::trainer::{AdamConfig, TrainPlan};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory holding `<split>.<base>-<code>.{src,tgt}` files.
    pub dir: PathBuf,
    pub base: String,
    /// Target-language codes, one pair each, in pair-id order.
    pub pairs: Vec<String>,
    pub bpe_merges: usize,
    pub max_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: "data".into(),
            base: "en".into(),
            pairs: Vec::new(),
            bpe_merges: 4000,
            max_len: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapeConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub n_heads: usize,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        ShapeConfig {
            d_model: 256,
            d_ff: 1024,
            n_layers: 2,
            n_heads: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub token_budget: usize,
    pub warmup: u64,
    pub lr_scale: f64,
    pub teacher_steps: u64,
    pub teacher_dropout: f64,
    pub student_steps: u64,
    pub student_dropout: f64,
    pub check_every: u64,
    /// Dev sentences per pair scored at each check.
    pub dev_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            token_budget: 8192,
            warmup: 4000,
            lr_scale: 1.0,
            teacher_steps: 30_000,
            teacher_dropout: 0.2,
            student_steps: 30_000,
            student_dropout: 0.1,
            check_every: 3000,
            dev_cap: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub lambda: f64,
    pub tau: f64,
    pub topk: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda: 0.5,
            tau: 1.0,
            topk: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbConfig {
    pub sigmas: Vec<f64>,
    pub seed: u64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            sigmas: vec![0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3],
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Where models, traces and reports are written.
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ShapeConfig,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub decode: DecodeOptions,
    pub perturb: PerturbConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            out_dir: "runs".into(),
            data: DataConfig::default(),
            model: ShapeConfig::default(),
            train: TrainConfig::default(),
            distill: DistillConfig::default(),
            decode: DecodeOptions::default(),
            perturb: PerturbConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub lambda: Option<f64>,
    pub tau: Option<f64>,
    pub check_every: Option<u64>,
    pub topk: Option<usize>,
    pub beam: Option<usize>,
    pub alpha: Option<f64>,
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), ConfigError> {
        if let Some(v) = o.lambda {
            self.distill.lambda = v;
        }
        if let Some(v) = o.tau {
            self.distill.tau = v;
        }
        if let Some(v) = o.check_every {
            self.train.check_every = v;
        }
        if let Some(v) = o.topk {
            self.distill.topk = v;
        }
        if let Some(v) = o.beam {
            self.decode.beam = v;
        }
        if let Some(v) = o.alpha {
            self.decode.alpha = v;
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError::Invalid(m));
        let probe = self.model_config(self.train.teacher_dropout, 8);
        if let Err(e) = probe.validate() {
            return fail(e.to_string());
        }
        if !(0.0..1.0).contains(&self.train.student_dropout) {
            return fail("student_dropout must lie in [0, 1)".into());
        }
        if let Err(e) = self.plan(0).validate() {
            return fail(e.to_string());
        }
        if self.perturb.sigmas.iter().any(|s| !(*s >= 0.0)) {
            return fail("perturbation sigmas must be non-negative".into());
        }
        let mut codes = self.data.pairs.clone();
        codes.sort();
        codes.dedup();
        if codes.len() != self.data.pairs.len() || codes.contains(&self.data.base) {
            return fail("pair codes must be distinct and differ from the base language".into());
        }
        Ok(())
    }

    pub fn model_config(&self, dropout: f64, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.model.d_model,
            d_ff: self.model.d_ff,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            dropout,
            vocab_size,
            max_len: self.data.max_len,
        }
    }

    /// Training plan for a run of `total_steps`.
    pub fn plan(&self, total_steps: u64) -> TrainPlan {
        TrainPlan {
            total_steps,
            check_every: self.train.check_every,
            tau: self.distill.tau,
            lambda: self.distill.lambda,
            topk: self.distill.topk,
            token_budget: self.train.token_budget,
            seed: self.seed,
            dev_cap: self.train.dev_cap,
            decode: self.decode,
            adam: AdamConfig {
                warmup: self.train.warmup,
                lr_scale: self.train.lr_scale,
                ..AdamConfig::default()
            },
        }
    }
}
