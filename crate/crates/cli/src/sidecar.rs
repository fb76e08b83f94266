//! `<artifact>.meta.json` files recording which configuration, seed and
//! artifact version produced each output. No timestamps, so reruns are
//! byte-identical.

use std::path::{Path, PathBuf};

use fcdd_core::io;
use serde::{Deserialize, Serialize};

use crate::{CliError, RunConfig};

/// Bumped whenever an output format changes.
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sidecar {
    pub artifact: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub artifact_version: u32,
    pub tool_version: String,
}

pub fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    artifact.with_file_name(name)
}

pub fn write(artifact: &Path, command: &str, config: &RunConfig) -> Result<(), CliError> {
    let meta = Sidecar {
        artifact: artifact
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        command: command.into(),
        config_hash: config.hash(),
        seed: config.seed,
        artifact_version: ARTIFACT_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").into(),
    };
    io::write_json(&sidecar_path(artifact), &meta)?;
    Ok(())
}

pub fn read(artifact: &Path) -> Result<Sidecar, CliError> {
    Ok(io::read_json(&sidecar_path(artifact))?)
}
