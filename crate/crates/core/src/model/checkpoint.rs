use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::CtConfig;
use super::data::Standardizer;
use super::params::CtParams;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "ct-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to reload a trained model. Stored as JSON with
/// round-trip float formatting, so reloading is bitwise exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: CtConfig,
    pub params: CtParams,
    /// EMA shadow, used for evaluation when present.
    pub ema: Option<CtParams>,
    pub x_scaler: Option<Standardizer>,
    pub y_scaler: Option<Standardizer>,
}

impl Checkpoint {
    pub fn new(config: CtConfig, params: CtParams) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config,
            params,
            ema: None,
            x_scaler: None,
            y_scaler: None,
        }
    }

    /// Parameters to evaluate with: the EMA shadow if stored, else the raw ones.
    pub fn eval_params(&self) -> &CtParams {
        self.ema.as_ref().unwrap_or(&self.params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse(format!(
                "`{}` is not a checkpoint",
                path.display()
            )));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        ck.config.validate()?;
        Ok(ck)
    }
}
