//! Append-only run manifests: one JSON object per invocation.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: Option<u128>,
}

pub fn version_string() -> String {
    match option_env!("ANTIPASTO_DESCRIBE") {
        Some(d) => d.to_string(),
        None => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

pub fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

impl RunManifest {
    pub fn start(command: &str, args: Vec<String>) -> Self {
        RunManifest {
            command: command.to_string(),
            args,
            config_path: None,
            seeds: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            version: version_string(),
            started_unix_ms: now_ms(),
            finished_unix_ms: None,
        }
    }

    /// Stamps the finish time and appends this manifest to `dir`.
    pub fn finish(mut self, dir: &Path) -> Result<()> {
        self.finished_unix_ms = Some(now_ms());
        append(dir, &self)
    }
}

/// Appends one line to `dir/manifest.jsonl`; earlier lines are never
/// rewritten.
pub fn append(dir: &Path, m: &RunManifest) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let line = serde_json::to_string(m).map_err(|e| Error::Format(e.to_string()))?;
    let mut f = OpenOptions::new().create(true).append(true).open(dir.join(MANIFEST_FILE))?;
    writeln!(f, "{line}")?;
    Ok(())
}

pub fn read_all(dir: &Path) -> Result<Vec<RunManifest>> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("manifest: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifests_append() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = RunManifest::start("pretrain", vec!["--out".into(), "x".into()]);
        a.seeds = vec![1, 2];
        a.clone().finish(dir.path()).unwrap();
        let first = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        RunManifest::start("eval", vec![]).finish(dir.path()).unwrap();
        let both = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(both.starts_with(&first));
        let all = read_all(dir.path()).unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(all[0].seeds, vec![1, 2]);
        assert_eq!(all[1].command, "eval");
        assert!(all[1].finished_unix_ms.is_some());
    }
}
