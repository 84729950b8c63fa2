use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::args::BUILD_ID;
use crate::CliError;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    /// Input path → sha256 hex digest.
    pub inputs: BTreeMap<String, String>,
    /// Output file → sha256 hex digest.
    pub outputs: BTreeMap<String, String>,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub rng: Option<String>,
    /// Only present with `--record-timing`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Input(format!("reading {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize) -> Result<Self, CliError> {
        Ok(RunManifest {
            command: command.to_string(),
            config: serde_json::to_value(config).map_err(|e| CliError::Internal(e.to_string()))?,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            tool_version: BUILD_ID.to_string(),
            seed: None,
            rng: None,
            wall_time_s: None,
        })
    }

    pub fn add_input(&mut self, path: &Path) -> Result<(), CliError> {
        let d = file_digest(path)?;
        self.inputs.insert(path.display().to_string(), d);
        Ok(())
    }
}

/// Collects output files of one run directory and writes the manifest last.
pub struct OutDir {
    dir: std::path::PathBuf,
    pub manifest: RunManifest,
}

impl OutDir {
    pub fn create(dir: &Path, manifest: RunManifest) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("creating {}: {e}", dir.display())))?;
        Ok(OutDir { dir: dir.to_path_buf(), manifest })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let p = self.dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| CliError::Input(format!("writing {}: {e}", p.display())))?;
        self.manifest.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<(), CliError> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    pub fn finish(self, wall_time_s: Option<f64>) -> Result<(), CliError> {
        let mut m = self.manifest;
        m.wall_time_s = wall_time_s;
        let mut s = serde_json::to_string_pretty(&m).map_err(|e| CliError::Internal(e.to_string()))?;
        s.push('\n');
        let p = self.dir.join(MANIFEST_NAME);
        std::fs::write(&p, s).map_err(|e| CliError::Input(format!("writing {}: {e}", p.display())))
    }
}
