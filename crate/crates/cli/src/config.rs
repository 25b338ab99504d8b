//! Experiment configuration: one strict JSON document.

use std::fs;
use std::path::{Path, PathBuf};

use rim_core::models::RimConfig;
use rim_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory of PGM, PPM or PNG images. Relative paths resolve against
    /// the config file.
    pub images: PathBuf,
    /// The last `holdout` images (in file name order) feed validation.
    pub holdout: usize,
    pub patch_size: usize,
    /// Patch stride; defaults to half the patch size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    /// Validation patches, evenly spread over the held-out set.
    #[serde(default = "default_val_patches")]
    pub val_patches: usize,
}

fn default_val_patches() -> usize {
    200
}

impl DataConfig {
    pub fn stride(&self) -> usize {
        self.stride.unwrap_or((self.patch_size / 2).max(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: RimConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Receives the checkpoint and logs. Relative to the config file.
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, String> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| e.to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), String> {
        self.model.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        let d = &self.data;
        if d.patch_size == 0 || d.stride() == 0 {
            return Err("patch_size and stride must be positive".into());
        }
        if d.holdout == 0 && d.val_patches > 0 {
            return Err("validation patches requested but holdout is 0".into());
        }
        Ok(())
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg =
            Self::from_json(&text).map_err(|message| CliError::Config { path: path.to_path_buf(), message })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.data.images = base.join(&cfg.data.images);
        cfg.output_dir = base.join(&cfg.output_dir);
        Ok(cfg)
    }
}
