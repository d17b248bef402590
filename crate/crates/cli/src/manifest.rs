use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Record of one command invocation, written last into the output directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the command's canonical JSON arguments.
    pub config_hash: String,
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub outputs: Vec<PathBuf>,
    pub timings: Vec<StageTiming>,
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn config_hash(config: &serde_json::Value) -> String {
    let digest = Sha256::digest(config.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Collects outputs and stage timings for a command writing into `dir`.
pub struct Recorder {
    dir: PathBuf,
    manifest: RunManifest,
    stage_start: Instant,
}

impl Recorder {
    pub fn new(command: &str, dir: &Path, config: &impl Serialize, seed: Option<u64>) -> Result<Self, CliError> {
        fs::create_dir_all(dir)?;
        let config = serde_json::to_value(config)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                command: command.to_string(),
                config_hash: config_hash(&config),
                config,
                inputs: Vec::new(),
                seed,
                outputs: Vec::new(),
                timings: Vec::new(),
            },
            stage_start: Instant::now(),
        })
    }

    pub fn input(&mut self, path: &Path) {
        self.manifest.inputs.push(path.to_path_buf());
    }

    /// Closes the current stage under `name`.
    pub fn stage(&mut self, name: &str) {
        self.manifest.timings.push(StageTiming {
            stage: name.to_string(),
            seconds: self.stage_start.elapsed().as_secs_f64(),
        });
        self.stage_start = Instant::now();
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        write_atomic(&path, bytes)?;
        self.manifest.outputs.push(path.clone());
        Ok(path)
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<PathBuf, CliError> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    pub fn finish(self) -> Result<RunManifest, CliError> {
        for p in &self.manifest.outputs {
            if !p.exists() {
                return Err(CliError::Io(format!("output {} missing", p.display())));
            }
        }
        let mut bytes = serde_json::to_vec_pretty(&self.manifest)?;
        bytes.push(b'\n');
        write_atomic(&self.dir.join(MANIFEST_NAME), &bytes)?;
        Ok(self.manifest)
    }
}
