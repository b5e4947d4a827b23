use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::segmenter::ScoringConfig;
use crate::trainer::TrainConfig;

/// Everything a command may need. Files may omit any section; unknown keys
/// are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
    pub compression: ScoringConfig,
    /// Share of tree nodes kept during generation; absent keeps all.
    pub keep_fraction: Option<f64>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let mut c: RunConfig = serde_json::from_str(text)?;
        c.sync();
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Copies the compression section into the training settings.
    pub fn sync(&mut self) {
        self.train.scoring = self.compression.clone();
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.compression.validate()?;
        self.train.validate()?;
        if let Some(f) = self.keep_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::arg(format!("keep_fraction {f} outside (0, 1]")));
            }
        }
        if self.compression.n + 1 > self.backbone.max_window {
            return Err(Error::arg(format!(
                "segment length {} does not fit the model window of {}",
                self.compression.n, self.backbone.max_window
            )));
        }
        Ok(())
    }

    /// The resolved configuration as pretty JSON, for run logs.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
