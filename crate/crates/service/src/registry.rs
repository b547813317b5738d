//! File-based model registry under `<data dir>/models`.
//!
//! Each registered checkpoint is stored as `<model_id>.fqc`, where the id is
//! the SHA-256 of its bytes. `registry.json` keeps the descriptive fields and
//! `ACTIVE` names the activated model, if any.

use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use fqc_core::model::decode_checkpoint;
use fqc_core::{Error, Model, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::pipeline::io_error;

const REGISTRY_FILE: &str = "registry.json";
const ACTIVE_FILE: &str = "ACTIVE";

/// Content hash of checkpoint bytes, as lowercase hex.
pub fn model_id(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub model_id: String,
    /// Relative to the models directory.
    pub checkpoint: PathBuf,
    pub arch_summary: String,
    /// SHA-256 of the training configuration JSON, when one was supplied.
    pub config_digest: Option<String>,
    pub created_at: DateTime<Utc>,
}

/// A checkpoint decoded for inference, tagged with its id.
#[derive(Debug)]
pub struct LoadedModel {
    pub model_id: String,
    pub model: Model<f32>,
}

impl LoadedModel {
    /// Decodes checkpoint bytes; the id is computed from the same bytes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (params, arch, _) = decode_checkpoint::<f32>(bytes)?;
        Ok(Self {
            model_id: model_id(bytes),
            model: Model::new(arch, params)?,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| io_error(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Debug, Clone)]
pub struct Registry {
    dir: PathBuf,
}

impl Registry {
    pub fn new(data_dir: &Path) -> Self {
        Self {
            dir: data_dir.join("models"),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn entries(&self) -> Result<Vec<RegistryEntry>> {
        let path = self.dir.join(REGISTRY_FILE);
        match std::fs::read_to_string(&path) {
            Ok(s) => Ok(serde_json::from_str(&s)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(io_error(&path, e)),
        }
    }

    pub fn entry(&self, id: &str) -> Result<Option<RegistryEntry>> {
        Ok(self.entries()?.into_iter().find(|e| e.model_id == id))
    }

    /// Copies a checkpoint into the registry. Registering the same bytes
    /// twice returns the existing entry.
    pub fn register(&self, checkpoint: &Path, config_json: Option<&[u8]>) -> Result<RegistryEntry> {
        let bytes = std::fs::read(checkpoint).map_err(|e| io_error(checkpoint, e))?;
        let (_, arch, _) = decode_checkpoint::<f32>(&bytes)?;
        let id = model_id(&bytes);
        let mut entries = self.entries()?;
        if let Some(e) = entries.iter().find(|e| e.model_id == id) {
            return Ok(e.clone());
        }
        std::fs::create_dir_all(&self.dir).map_err(|e| io_error(&self.dir, e))?;
        let file = PathBuf::from(format!("{id}.fqc"));
        let dest = self.dir.join(&file);
        std::fs::write(&dest, &bytes).map_err(|e| io_error(&dest, e))?;
        let entry = RegistryEntry {
            model_id: id,
            checkpoint: file,
            arch_summary: arch.summary(),
            config_digest: config_json.map(|c| hex::encode(Sha256::digest(c))),
            created_at: Utc::now(),
        };
        entries.push(entry.clone());
        self.write_file(REGISTRY_FILE, serde_json::to_string_pretty(&entries)? + "\n")?;
        Ok(entry)
    }

    /// Loads a registered model, checking that its bytes still hash to its id.
    pub fn load(&self, entry: &RegistryEntry) -> Result<LoadedModel> {
        let path = self.dir.join(&entry.checkpoint);
        let loaded = LoadedModel::read(&path)?;
        if loaded.model_id != entry.model_id {
            return Err(Error::Consistency(format!(
                "{} hashes to {}, registered as {}",
                path.display(),
                loaded.model_id,
                entry.model_id
            )));
        }
        Ok(loaded)
    }

    pub fn active_id(&self) -> Result<Option<String>> {
        let path = self.dir.join(ACTIVE_FILE);
        match std::fs::read_to_string(&path) {
            Ok(s) => Ok(Some(s.trim().to_string()).filter(|s| !s.is_empty())),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_error(&path, e)),
        }
    }

    pub fn set_active(&self, id: &str) -> Result<()> {
        self.write_file(ACTIVE_FILE, format!("{id}\n"))
    }

    /// Writes through a temporary file and a rename so readers never see a
    /// partial file.
    fn write_file(&self, name: &str, contents: String) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(|e| io_error(&self.dir, e))?;
        let tmp = self.dir.join(format!(".{name}.tmp"));
        let dest = self.dir.join(name);
        std::fs::write(&tmp, contents).map_err(|e| io_error(&tmp, e))?;
        std::fs::rename(&tmp, &dest).map_err(|e| io_error(&dest, e))
    }
}
