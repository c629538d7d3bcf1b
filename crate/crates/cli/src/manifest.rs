use std::path::{Path, PathBuf};

use serde::Serialize;
use vf_core::{Result, RunConfig, VfError};

pub const MANIFEST_FILE: &str = "run.toml";
/// Written once training ends; the manifest itself is never rewritten.
pub const FINISHED_FILE: &str = "finished.toml";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub seed: u64,
    pub code_version: String,
    pub started_unix: u64,
    pub metrics_csv: PathBuf,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).expect("manifest is serializable");
        std::fs::write(path, text).map_err(|e| VfError::io(path, e))
    }
}

pub fn write_finished(dir: &Path, unix: u64) -> Result<()> {
    let path = dir.join(FINISHED_FILE);
    std::fs::write(&path, format!("finished_unix = {unix}\n")).map_err(|e| VfError::io(&path, e))
}
