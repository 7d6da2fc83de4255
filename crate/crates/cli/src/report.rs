//! Report envelope and deterministic emission.
//!
//! Reports carry the tool version, the fully resolved configuration
//! (including every seed), and checksums of the inputs, so a run can be
//! reproduced from its report alone. Identical runs produce byte-identical
//! files: no timestamps, no map iteration order, stable float formatting.

use serde::Serialize;
use serde_json::Value;
use std::path::{Path, PathBuf};

pub const TOOL_NAME: &str = "compressense";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Serialize)]
pub struct Report {
    pub tool: ToolInfo,
    pub command: String,
    pub config: Value,
    pub inputs: Value,
    pub results: Value,
}

#[derive(Serialize)]
pub struct ToolInfo {
    pub name: &'static str,
    pub version: &'static str,
}

impl Report {
    pub fn new(command: &str, config: Value, inputs: Value, results: Value) -> Self {
        Self {
            tool: ToolInfo {
                name: TOOL_NAME,
                version: TOOL_VERSION,
            },
            command: command.to_string(),
            config,
            inputs,
            results,
        }
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes)?;
        Ok(())
    }
}

/// Sibling path with a different extension (heatmap/greedy CSV exports).
pub fn sibling_with_extension(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}
