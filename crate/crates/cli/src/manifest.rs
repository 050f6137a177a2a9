//! Run manifests: what produced an artifact, from which inputs. Timestamps
//! live here and nowhere else so the artifacts themselves stay
//! reproducible.

use std::path::{Path, PathBuf};

use anyhow::Context;
use regiontok_core::rng::GENERATOR_ID;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const TOOL: &str = "regiontok";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

impl FileDigest {
    pub fn of(path: &Path) -> anyhow::Result<Self> {
        let data = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
        Ok(Self { path: path.display().to_string(), sha256: sha256_hex(&data), bytes: data.len() as u64 })
    }
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub generator: String,
    pub command: String,
    pub config: Vec<(String, String)>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started_at: String,
    pub finished_at: String,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn start(command: &str, config: &RunConfig) -> Self {
        Self {
            tool: TOOL.into(),
            tool_version: TOOL_VERSION.into(),
            generator: GENERATOR_ID.into(),
            command: command.into(),
            config: config.snapshot(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_at: now(),
            finished_at: String::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        self.inputs.push(FileDigest::of(path)?);
        Ok(())
    }

    /// Hash the outputs and write the manifest to `path`.
    pub fn finish(mut self, outputs: &[PathBuf], path: &Path) -> anyhow::Result<()> {
        for o in outputs {
            self.outputs.push(FileDigest::of(o)?);
        }
        self.finished_at = now();
        let text = serde_json::to_string_pretty(&self)? + "\n";
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}

/// `dir/manifest.json` for a directory output, `file.manifest.json` next to
/// a single-file output.
pub fn manifest_path(output: &Path) -> PathBuf {
    if output.is_dir() {
        output.join("manifest.json")
    } else {
        let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        output.with_file_name(name)
    }
}
