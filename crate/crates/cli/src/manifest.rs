//! Run manifests: `key=value` text written before any work starts and
//! rewritten when the run completes.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use crate::config::RunConfig;

pub struct RunManifest {
    path: PathBuf,
    head: Vec<(String, String)>,
    tail: Vec<(String, String)>,
}

impl RunManifest {
    /// Writes the manifest with `status=incomplete`.
    pub fn begin(path: &Path, command: &str, cfg: &RunConfig, deterministic: bool) -> Result<Self> {
        let mut head = vec![
            ("command".to_string(), command.to_string()),
            ("version".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("seed".to_string(), cfg.seed.to_string()),
            ("deterministic".to_string(), deterministic.to_string()),
            ("config_hash".to_string(), cfg.hash()),
        ];
        head.extend(cfg.entries().into_iter().map(|(k, v)| (format!("config.{k}"), v)));
        let m = Self {
            path: path.to_path_buf(),
            head,
            tail: Vec::new(),
        };
        m.write("incomplete")?;
        Ok(m)
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.tail.push((key.into(), value.to_string()));
    }

    pub fn finish(self) -> Result<()> {
        self.write("complete")
    }

    /// Records the error and leaves the run marked incomplete.
    pub fn abort(mut self, err: &anyhow::Error) -> Result<()> {
        self.push("error", format!("{err:#}").replace('\n', " "));
        self.write("incomplete")
    }

    fn write(&self, status: &str) -> Result<()> {
        let mut out = format!("status={status}\n");
        for (k, v) in self.head.iter().chain(&self.tail) {
            out.push_str(&format!("{k}={v}\n"));
        }
        std::fs::write(&self.path, out).with_context(|| format!("writing {}", self.path.display()))
    }
}

/// Parses `key=value` lines.
pub fn read_manifest(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}
