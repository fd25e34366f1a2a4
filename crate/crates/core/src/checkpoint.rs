//! Versioned JSON checkpoint format.
//!
//! ```text
//! {
//!   "format": "ardir-checkpoint",
//!   "version": 1,
//!   "architecture": { ...CnnArchitecture... },
//!   "tap_layers": [ {"index":0,"channels":4,"height":8,"width":8}, ... ],
//!   "epoch": 12,
//!   "seed": 0,
//!   "params": [ ... ]
//! }
//! ```
//!
//! Parameters are written with shortest round-trip formatting, so a
//! save/load cycle reproduces every bit.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Classifier, CnnArchitecture, LayerDesc, SmallCnn};

pub const CHECKPOINT_FORMAT: &str = "ardir-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub architecture: CnnArchitecture,
    pub tap_layers: Vec<LayerDesc>,
    /// Number of completed training epochs.
    pub epoch: usize,
    pub seed: u64,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn from_model(model: &SmallCnn, epoch: usize, seed: u64) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            architecture: model.architecture().clone(),
            tap_layers: model.tap_layers().to_vec(),
            epoch,
            seed,
            params: model.params().to_vec(),
        }
    }

    pub fn to_model(&self) -> Result<SmallCnn> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format tag {:?}", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let model = SmallCnn::from_params(self.architecture.clone(), self.params.clone())?;
        if model.tap_layers() != self.tap_layers.as_slice() {
            return Err(Error::Checkpoint(
                "recorded tap layers disagree with the architecture descriptor".into(),
            ));
        }
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        std::fs::write(&tmp, self.to_json()?).map_err(|e| Error::io(path, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Content hash used as the checkpoint id in run manifests.
    pub fn id(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_json()?.as_bytes())))
    }
}
