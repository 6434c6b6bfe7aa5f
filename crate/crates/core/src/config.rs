//! Experiment configuration read from JSON. Command-line flags override it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{SplitMode, SyntheticConfig};
use crate::error::{Error, Result};
use crate::hashing::HashConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub mode: SplitMode,
    pub holdout: Vec<usize>,
    /// Cut-offs for precision@k.
    pub p_at: Vec<usize>,
    /// Truncate AP to the top `k` ranks.
    pub top_k: Option<usize>,
    /// In zero-shot mode, rank against every photo instead of only the
    /// held-out classes.
    pub full_gallery: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: SplitMode::Standard,
            holdout: Vec::new(),
            p_at: Vec::new(),
            top_k: None,
            full_gallery: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: SyntheticConfig,
    pub train: TrainConfig,
    pub hash: HashConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        self.hash.validate()?;
        if self.eval.mode == SplitMode::ZeroShot && self.eval.holdout.is_empty() {
            return Err(Error::InvalidParameter("zero-shot evaluation needs --holdout".into()));
        }
        if self.eval.p_at.contains(&0) || self.eval.top_k == Some(0) {
            return Err(Error::InvalidParameter("rank cut-offs must be >= 1".into()));
        }
        Ok(())
    }
}
