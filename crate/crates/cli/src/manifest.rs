//! Run manifests and atomic file output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

pub const VERSION: &str = env!("EGOGRAPH_VERSION");

/// Record of one command invocation, written before the work starts and
/// rewritten with a finish time once every output exists.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub version: String,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: u64, outputs: Vec<PathBuf>) -> Self {
        RunManifest {
            command: command.to_string(),
            args: std::env::args().collect(),
            config,
            seed,
            started_at: now(),
            finished_at: None,
            version: VERSION.to_string(),
            outputs,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    /// Stamps the finish time after checking that every named output exists.
    pub fn finish(&mut self, path: &Path) -> Result<()> {
        if let Some(missing) = self.outputs.iter().find(|p| !p.exists()) {
            anyhow::bail!("expected output {} was not written", missing.display());
        }
        self.finished_at = Some(now());
        self.write(path)
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Writes `bytes` to a temporary file beside `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("creating a temporary file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("moving output into place at {}", path.display()))?;
    Ok(())
}

/// Moves every file of `from` into `to`, replacing existing files.
pub fn move_files(from: &Path, to: &Path) -> Result<Vec<PathBuf>> {
    let mut moved = Vec::new();
    let mut entries: Vec<_> = fs::read_dir(from)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let dest = to.join(entry.file_name());
        fs::rename(entry.path(), &dest)
            .with_context(|| format!("moving output to {}", dest.display()))?;
        moved.push(dest);
    }
    Ok(moved)
}
