use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::digest::file_digest;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> std::io::Result<Self> {
        Ok(FileDigest { path: path.to_path_buf(), sha256: file_digest(path)? })
    }
}

/// Record of one CLI run: what went in, what came out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub toolkit_version: String,
    pub inputs: Vec<FileDigest>,
    pub parameters: Value,
    pub outputs: Vec<FileDigest>,
    /// Headline results of the run (state counts, values, ε*, ...).
    pub results: Value,
    pub wall_time_s: f64,
}

impl RunManifest {
    pub fn new(
        subcommand: &str,
        inputs: &[PathBuf],
        parameters: Value,
        outputs: &[PathBuf],
        results: Value,
        wall_time: Duration,
    ) -> std::io::Result<Self> {
        let digests = |paths: &[PathBuf]| paths.iter().map(|p| FileDigest::of(p)).collect::<std::io::Result<Vec<_>>>();
        Ok(RunManifest {
            subcommand: subcommand.into(),
            toolkit_version: env!("CARGO_PKG_VERSION").into(),
            inputs: digests(inputs)?,
            parameters,
            outputs: digests(outputs)?,
            results,
            wall_time_s: wall_time.as_secs_f64(),
        })
    }

    /// Recomputes every listed digest and returns the files that changed.
    pub fn stale_files(&self) -> Vec<PathBuf> {
        self.inputs
            .iter()
            .chain(&self.outputs)
            .filter(|f| file_digest(&f.path).map_or(true, |d| d != f.sha256))
            .map(|f| f.path.clone())
            .collect()
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).expect("manifest serializes") + "\n")
    }

    pub fn read(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

/// `out.ext` -> `out.ext.manifest.json`.
pub fn beside(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_os_string();
    name.push(".manifest.json");
    PathBuf::from(name)
}
