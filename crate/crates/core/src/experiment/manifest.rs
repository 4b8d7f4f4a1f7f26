use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::ExperimentConfig;
use crate::envs::EnvSpec;
use crate::error::{Error, Result};

/// Record of one command's outputs. Holds no timestamps, so reruns of the
/// same config reproduce it byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub experiment: String,
    pub config_hash: String,
    pub seed: u64,
    pub profile: String,
    pub version: String,
    pub env: EnvSpec,
    /// Output file name to SHA-256 of its contents.
    pub files: BTreeMap<String, String>,
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Manifest {
    /// Digests the named files inside `dir`.
    pub fn new(command: &str, cfg: &ExperimentConfig, profile: &str, dir: &Path, files: &[&str]) -> Result<Self> {
        let files = files
            .iter()
            .map(|f| Ok((f.to_string(), file_digest(&dir.join(f))?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            command: command.to_string(),
            experiment: cfg.name.clone(),
            config_hash: cfg.hash()?,
            seed: cfg.seed,
            profile: profile.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            env: cfg.env.build()?.spec(),
            files,
        })
    }

    pub fn file_name(command: &str) -> String {
        format!("manifest-{command}.toml")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(Self::file_name(&self.command));
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}
