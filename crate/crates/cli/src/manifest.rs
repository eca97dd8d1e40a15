//! `manifest.json`: what a command ran with, so it can be replayed.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use dafec_core::pipeline::TrainConfig;
use dafec_core::synthetic::SyntheticSpec;
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DataPaths {
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub gold: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: TrainConfig,
    pub synthetic: Option<SyntheticSpec>,
    pub data: DataPaths,
    pub out_dir: PathBuf,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

impl RunManifest {
    pub fn new(
        command: &str,
        argv: &[String],
        config: &TrainConfig,
        synthetic: Option<&SyntheticSpec>,
        data: DataPaths,
        out_dir: &Path,
    ) -> Self {
        Self {
            command: command.to_string(),
            argv: argv.to_vec(),
            config: config.clone(),
            synthetic: synthetic.cloned(),
            data,
            out_dir: out_dir.to_path_buf(),
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        }
    }

    pub fn write(&self) -> Result<()> {
        let path = self.out_dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
