//! Run provenance embedded in every artifact the CLI writes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Hex SHA-256 of a file's contents.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    /// File name without directories, so moving inputs keeps outputs stable.
    pub name: String,
    pub sha256: String,
}

/// The settings of one CLI run: the subcommand, every flag that influences
/// output content, and a digest of every input file. Output paths and the
/// worker count are deliberately absent since they never change content.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub settings: serde_json::Value,
    pub inputs: BTreeMap<String, InputDigest>,
}

impl RunConfig {
    pub fn new(command: &str, settings: serde_json::Value) -> Self {
        RunConfig {
            tool: "bem".to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            settings,
            inputs: BTreeMap::new(),
        }
    }

    /// Records `path` under `role` with its content hash.
    pub fn input(mut self, role: &str, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        self.inputs.insert(
            role.to_string(),
            InputDigest {
                name,
                sha256: file_sha256(path)?,
            },
        );
        Ok(self)
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("RunConfig is always serializable")
    }
}
