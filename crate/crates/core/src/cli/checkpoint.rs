//! Versioned JSON checkpoint: header, config snapshot and the complete
//! trainer state (parameters, Adam moments, replay buffer, RNG).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::AutoencoderModel;
use crate::trainer::TrainerState;

pub const CHECKPOINT_FORMAT: &str = "nae-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ExperimentConfig,
    /// `(rows, cols)` when the model was trained on images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_shape: Option<(usize, usize)>,
    pub trainer: TrainerState,
}

#[derive(Deserialize)]
struct Header {
    format: Option<String>,
    version: Option<u32>,
}

impl Checkpoint {
    pub fn new(config: ExperimentConfig, image_shape: Option<(usize, usize)>, trainer: TrainerState) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config,
            image_shape,
            trainer,
        }
    }

    pub fn model(&self) -> Result<AutoencoderModel> {
        AutoencoderModel::from_state(self.trainer.model.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Parse(e.to_string()))?;
        // Write-then-rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |e: serde_json::Error| Error::Parse(format!("{}: {e}", path.display()));
        let head: Header = serde_json::from_str(&text).map_err(parse_err)?;
        if head.format.as_deref() != Some(CHECKPOINT_FORMAT) || head.version != Some(CHECKPOINT_VERSION) {
            return Err(Error::Parse(format!(
                "{}: not a version {CHECKPOINT_VERSION} checkpoint (format {:?}, version {:?})",
                path.display(),
                head.format,
                head.version
            )));
        }
        serde_json::from_str(&text).map_err(parse_err)
    }
}
