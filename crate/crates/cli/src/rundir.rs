//! Run directories: `<output_dir>/<timestamp>-<command>-<hash8>/`.
//!
//! `config.toml` is written before anything else and `summary.json` last;
//! the summary lists every artifact the command produced.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::CliResult;

pub const CONFIG_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.json";

pub struct RunDirectory {
    path: PathBuf,
    artifacts: Vec<String>,
}

fn short_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .take(4)
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl RunDirectory {
    /// Creates a fresh directory and writes the config snapshot into it.
    pub fn create(config: &ExperimentConfig, command: &str) -> CliResult<Self> {
        let snapshot = config.to_toml()?;
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        let base = format!("{stamp}-{command}-{}", short_hash(&snapshot));
        fs::create_dir_all(&config.output_dir)?;
        let mut path = config.output_dir.join(&base);
        let mut suffix = 2;
        while path.exists() {
            path = config.output_dir.join(format!("{base}-{suffix}"));
            suffix += 1;
        }
        fs::create_dir(&path)?;
        let mut dir = Self { path, artifacts: Vec::new() };
        dir.write(CONFIG_FILE, &snapshot)?;
        Ok(dir)
    }

    /// Reopens an existing directory, e.g. to resume a search.
    pub fn reopen(path: &Path) -> CliResult<Self> {
        let mut artifacts = Vec::new();
        for entry in fs::read_dir(path)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if name != SUMMARY_FILE {
                artifacts.push(name);
            }
        }
        artifacts.sort();
        Ok(Self { path: path.to_path_buf(), artifacts })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Records `name` as an artifact without writing it (for files that are
    /// appended to elsewhere).
    pub fn register(&mut self, name: &str) {
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.to_string());
        }
    }

    pub fn write(&mut self, name: &str, contents: &str) -> CliResult<()> {
        let target = self.path.join(name);
        if let Some(parent) = target.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(target, contents)?;
        self.register(name);
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let text = serde_json::to_string_pretty(value)?;
        self.write(name, &(text + "\n"))
    }

    /// Writes `summary.json`: the command, the artifact list, and `extra`.
    pub fn finish(mut self, command: &str, extra: Value) -> CliResult<PathBuf> {
        self.artifacts.sort();
        let mut summary = json!({
            "command": command,
            "status": "ok",
            "finished": chrono::Local::now().to_rfc3339(),
            "artifacts": self.artifacts,
        });
        if let (Value::Object(s), Value::Object(e)) = (&mut summary, extra) {
            s.extend(e);
        }
        let text = serde_json::to_string_pretty(&summary)?;
        fs::write(self.path.join(SUMMARY_FILE), text + "\n")?;
        Ok(self.path)
    }
}
