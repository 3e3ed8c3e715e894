//! Versioned checkpoint container: named parameter arrays, optimizer state,
//! EMA shadow, normalization statistics, and the config that produced them.
//! Loading recomputes the config hash and refuses mismatches.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::numerics::normalize::NormStats;
use crate::numerics::optim::{AdamW, EmaShadow};
use crate::numerics::params::ParamStore;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub config_hash: String,
    pub params: ParamStore,
    pub optimizer: Option<AdamW>,
    pub ema: Option<EmaShadow>,
    pub norm_stats: Option<NormStats>,
    /// Content hash of the stage-1 weights at freeze time; stage 2 asserts
    /// it every epoch.
    pub frozen_hash: Option<String>,
    /// Epochs completed when this checkpoint was written.
    pub epoch: usize,
}

impl Checkpoint {
    pub fn new(config: &RunConfig, params: ParamStore) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            config_hash: config.hash(),
            params,
            optimizer: None,
            ema: None,
            norm_stats: None,
            frozen_hash: None,
            epoch: 0,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    /// Load and verify: version is known and the stored config re-hashes to
    /// the stored hash (guards against hand-edited or mixed-up files).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {})",
                ckpt.version, CHECKPOINT_VERSION
            )));
        }
        let actual = ckpt.config.hash();
        if actual != ckpt.config_hash {
            return Err(Error::ConfigHashMismatch { stored: ckpt.config_hash, actual });
        }
        Ok(ckpt)
    }
}
