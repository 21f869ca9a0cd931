use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use advsr_core::loss::LossBalance;
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, Seeds};
use crate::layout::RunLayout;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Writes through a temporary sibling and renames, so readers never see a
/// half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", path.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Everything needed to reproduce one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub phase: Option<String>,
    pub config: ExperimentConfig,
    pub config_sha256: String,
    pub seeds: Seeds,
    /// Loss balance of an advsr run.
    pub balance: Option<LossBalance>,
    pub selected_epoch: Option<usize>,
    /// Run-relative path to SHA-256 of each file read.
    pub inputs: BTreeMap<String, String>,
    /// Run-relative path to SHA-256 of each file written.
    pub outputs: BTreeMap<String, String>,
    /// Wall-clock milliseconds per stage. The only field that varies
    /// between identical runs.
    pub timings_ms: BTreeMap<String, u64>,
}

impl RunManifest {
    pub fn new(command: &str, phase: Option<&str>, cfg: &ExperimentConfig) -> Self {
        RunManifest {
            tool_version: TOOL_VERSION.to_string(),
            command: command.to_string(),
            phase: phase.map(str::to_string),
            config: cfg.clone(),
            config_sha256: sha256_hex(cfg.to_json().as_bytes()),
            seeds: cfg.seeds(),
            balance: None,
            selected_epoch: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            timings_ms: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, layout: &RunLayout, path: &Path) -> Result<()> {
        self.inputs
            .insert(layout.relative(path), sha256_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, layout: &RunLayout, path: &Path) -> Result<()> {
        self.outputs
            .insert(layout.relative(path), sha256_file(path)?);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }
}
