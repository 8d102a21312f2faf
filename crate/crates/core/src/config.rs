//! Experiment configuration files (TOML) and their content hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::synthdata::SyntheticConfig;
use crate::trainer::{RunMode, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Index of the held-out domain.
    pub held_out: usize,
    /// Source domain indices; all other domains when absent.
    pub sources: Option<Vec<usize>>,
    /// Fraction of each domain's identities used for training.
    pub train_fraction: f64,
    pub data: SyntheticConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let data = SyntheticConfig::default();
        Self {
            name: "default".into(),
            held_out: data.n_domains - 1,
            sources: None,
            train_fraction: 0.5,
            encoder: EncoderConfig {
                input_dim: data.input_dim,
                ..Default::default()
            },
            data,
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn source_domains(&self) -> Vec<usize> {
        match &self.sources {
            Some(s) => s.clone(),
            None => (0..self.data.n_domains).filter(|&d| d != self.held_out).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        if self.encoder.input_dim != self.data.input_dim {
            return Err(Error::Config(format!(
                "encoder input_dim {} differs from data input_dim {}",
                self.encoder.input_dim, self.data.input_dim
            )));
        }
        if self.held_out >= self.data.n_domains {
            return Err(Error::Config(format!(
                "held_out {} out of range for {} domains",
                self.held_out, self.data.n_domains
            )));
        }
        let sources = self.source_domains();
        if sources.is_empty() {
            return Err(Error::Config("no source domains".into()));
        }
        if self.train.mode != RunMode::Baseline && sources.len() < 2 {
            return Err(Error::Config("meta-learning needs at least 2 source domains".into()));
        }
        let mut seen = vec![false; self.data.n_domains];
        for &s in &sources {
            if s >= self.data.n_domains || s == self.held_out || seen[s] {
                return Err(Error::Config(format!("invalid source domain {s}")));
            }
            seen[s] = true;
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// First 12 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(digest)[..12].to_string()
    }
}
