//! Named teacher checkpoints, kept in a directory with a JSON index.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::train::TeacherModelKind;

/// Environment variable naming the registry directory.
pub const TEACHER_DIR_ENV: &str = "ARDIR_TEACHER_DIR";
const INDEX: &str = "registry.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    /// File name inside the registry directory.
    pub checkpoint: String,
    pub checkpoint_id: String,
    pub kind: TeacherModelKind,
    /// Hash of the config that trained it, if trained by this tool.
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone)]
pub struct TeacherRegistry {
    dir: PathBuf,
}

impl TeacherRegistry {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    /// Registry at `$ARDIR_TEACHER_DIR`, or `./teachers`.
    pub fn from_env() -> Self {
        Self::new(std::env::var_os(TEACHER_DIR_ENV).map_or_else(|| PathBuf::from("teachers"), PathBuf::from))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn entries(&self) -> Result<BTreeMap<String, RegistryEntry>> {
        let path = self.dir.join(INDEX);
        if !path.exists() {
            return Ok(BTreeMap::new());
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn register(
        &self,
        name: &str,
        checkpoint: &Checkpoint,
        kind: TeacherModelKind,
        config_hash: Option<String>,
    ) -> Result<RegistryEntry> {
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(Error::config(format!("teacher name {name:?} must be [A-Za-z0-9_-]+")));
        }
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let file = format!("{name}.ckpt.json");
        checkpoint.save(self.dir.join(&file))?;
        let entry = RegistryEntry {
            checkpoint: file,
            checkpoint_id: checkpoint.id()?,
            kind,
            config_hash,
        };
        let mut all = self.entries()?;
        all.insert(name.to_string(), entry.clone());
        let path = self.dir.join(INDEX);
        std::fs::write(&path, serde_json::to_string_pretty(&all)?).map_err(|e| Error::io(&path, e))?;
        Ok(entry)
    }

    pub fn resolve(&self, name: &str) -> Result<(RegistryEntry, Checkpoint)> {
        let entry = self.entries()?.remove(name).ok_or_else(|| {
            Error::Checkpoint(format!("no teacher named {name:?} in {}", self.dir.display()))
        })?;
        let ck = Checkpoint::load(self.dir.join(&entry.checkpoint))?;
        if ck.id()? != entry.checkpoint_id {
            return Err(Error::Checkpoint(format!(
                "teacher {name:?} does not match its registered id {}",
                entry.checkpoint_id
            )));
        }
        Ok((entry, ck))
    }
}
