use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
}

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<InputFile>,
    pub outputs: Vec<PathBuf>,
    pub duration_secs: f64,
    #[serde(skip)]
    started: Option<Instant>,
}

impl RunManifest {
    pub fn start(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            config,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            duration_secs: 0.0,
            started: Some(Instant::now()),
        }
    }

    pub fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        let bytes = std::fs::read(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        self.inputs.push(InputFile {
            path: path.to_path_buf(),
            sha256: Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect(),
        });
        Ok(())
    }

    pub fn output(&mut self, path: PathBuf) {
        self.outputs.push(path);
    }

    /// Writes `manifest.json` into `dir`.
    pub fn finish(mut self, dir: &Path) -> anyhow::Result<PathBuf> {
        self.duration_secs = self.started.map_or(0.0, |s| s.elapsed().as_secs_f64());
        let path = dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&self)?)?;
        Ok(path)
    }
}
