//! Versioned checkpoint container: a safetensors file whose string metadata
//! carries the format tag, version and JSON echoes of the configuration.
//!
//! All metadata travels as one sorted JSON object under a single header key,
//! so identical checkpoints serialize to identical bytes.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: &str = "1";
const FORMAT_KEY: &str = "format";
const VERSION_KEY: &str = "version";
const HEADER_KEY: &str = "reactgen";

pub struct Checkpoint {
    pub tensors: HashMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(format: &str) -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert(FORMAT_KEY.to_string(), format.to_string());
        metadata.insert(VERSION_KEY.to_string(), CHECKPOINT_VERSION.to_string());
        Checkpoint {
            tensors: HashMap::new(),
            metadata,
        }
    }

    pub fn insert_meta(&mut self, key: &str, value: impl Into<String>) {
        self.metadata.insert(key.to_string(), value.into());
    }

    pub fn insert_json<T: serde::Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        self.insert_meta(key, serde_json::to_string(value)?);
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::invalid(format!("checkpoint metadata lacks {key:?}")))
    }

    pub fn json<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        Ok(serde_json::from_str(self.meta(key)?)?)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid(format!("checkpoint lacks tensor {name:?}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut entries: Vec<(&String, &Tensor)> = self.tensors.iter().collect();
        entries.sort_by(|a, b| a.0.cmp(b.0));
        let header = HashMap::from([(HEADER_KEY.to_string(), serde_json::to_string(&self.metadata)?)]);
        safetensors::serialize_to_file(entries, Some(header), path).map_err(|e| {
            Error::Corrupt {
                path: path.to_path_buf(),
                reason: e.to_string(),
            }
        })
    }

    /// Loads and checks the format tag and version.
    pub fn load(path: &Path, format: &str, stage: &'static str) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingCheckpoint {
                path: path.to_path_buf(),
                stage,
            });
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let corrupt = |reason: String| Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| corrupt(e.to_string()))?;
        let metadata: BTreeMap<String, String> = match header.metadata().as_ref().and_then(|m| m.get(HEADER_KEY)) {
            Some(text) => serde_json::from_str(text).map_err(|e| corrupt(e.to_string()))?,
            None => BTreeMap::new(),
        };
        let got = metadata.get(FORMAT_KEY).map(String::as_str);
        if got != Some(format) {
            return Err(corrupt(format!("expected format {format:?}, found {got:?}")));
        }
        let version = metadata.get(VERSION_KEY).map(String::as_str);
        if version != Some(CHECKPOINT_VERSION) {
            return Err(corrupt(format!("unsupported checkpoint version {version:?}")));
        }
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        Ok(Checkpoint { tensors, metadata })
    }
}

/// Hex SHA-256 of a file, used to tie downstream models to their tokenizer.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
