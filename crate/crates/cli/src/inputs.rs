//! Resolution of model and token inputs, with provenance for reports.

use crate::report::sha256_file;
use anyhow::{anyhow, bail, Result};
use compressense::model::{
    generate_tokens, load_weights, synth_model, ModelConfig, ModelWeights, TokenDataset,
    DEFAULT_CHUNK_LEN,
};
use serde_json::{json, Value};
use std::path::{Path, PathBuf};

pub struct ResolvedModel {
    pub weights: ModelWeights,
    pub provenance: Value,
}

pub fn preset_config(name: &str) -> Result<ModelConfig> {
    match name {
        "tiny" => Ok(ModelConfig::tiny()),
        "tiny-deep" => Ok(ModelConfig::tiny_deep()),
        "gpt2-small" => Ok(ModelConfig::gpt2_small()),
        other => bail!("unknown synth preset '{other}' (tiny, tiny-deep, gpt2-small)"),
    }
}

pub fn resolve_model(
    model_path: Option<&PathBuf>,
    synth_preset: Option<&str>,
    model_seed: u64,
) -> Result<ResolvedModel> {
    match (model_path, synth_preset) {
        (Some(path), _) => {
            if !path.exists() {
                bail!("model container not found: {}", path.display());
            }
            let weights = load_weights(path)?;
            let provenance = json!({
                "kind": "container",
                "path": path.display().to_string(),
                "sha256": sha256_file(path)?,
                "checksum": format!("{:016x}", weights.checksum()),
                "config": weights.config,
            });
            Ok(ResolvedModel {
                weights,
                provenance,
            })
        }
        (None, Some(preset)) => {
            let config = preset_config(preset)?;
            let weights = synth_model(&config, model_seed)?;
            let provenance = json!({
                "kind": "synth",
                "preset": preset,
                "model_seed": model_seed,
                "checksum": format!("{:016x}", weights.checksum()),
                "config": config,
            });
            Ok(ResolvedModel {
                weights,
                provenance,
            })
        }
        (None, None) => Err(anyhow!("provide a model via --model PATH or --synth PRESET")),
    }
}

pub struct ResolvedTokens {
    pub dataset: TokenDataset,
    pub provenance: Value,
}

pub fn resolve_tokens(
    tokens_path: Option<&Path>,
    gen_count: usize,
    chunk_len: Option<usize>,
    seed: u64,
    vocab_size: usize,
) -> Result<ResolvedTokens> {
    let chunk_len = chunk_len.unwrap_or(DEFAULT_CHUNK_LEN);
    match tokens_path {
        Some(path) => {
            if !path.exists() {
                bail!("token file not found: {}", path.display());
            }
            let dataset = TokenDataset::load(path, chunk_len)?;
            dataset.validate_for(vocab_size)?;
            let provenance = json!({
                "kind": "file",
                "path": path.display().to_string(),
                "sha256": sha256_file(path)?,
                "count": dataset.len(),
                "chunk_len": chunk_len,
                "checksum": format!("{:016x}", dataset.checksum()),
            });
            Ok(ResolvedTokens {
                dataset,
                provenance,
            })
        }
        None => {
            let dataset = TokenDataset::new(generate_tokens(vocab_size, gen_count, seed), chunk_len);
            let provenance = json!({
                "kind": "generated",
                "count": dataset.len(),
                "seed": seed,
                "chunk_len": chunk_len,
                "checksum": format!("{:016x}", dataset.checksum()),
            });
            Ok(ResolvedTokens {
                dataset,
                provenance,
            })
        }
    }
}

/// Values from an optional JSON config file; flags override these, these
/// override built-in defaults.
pub struct FileDefaults(Option<Value>);

impl FileDefaults {
    pub fn load(path: Option<&PathBuf>) -> Result<Self> {
        match path {
            None => Ok(Self(None)),
            Some(p) => {
                if !p.exists() {
                    bail!("config file not found: {}", p.display());
                }
                let value: Value = serde_json::from_str(&std::fs::read_to_string(p)?)?;
                if !value.is_object() {
                    bail!("config file must hold a JSON object");
                }
                Ok(Self(Some(value)))
            }
        }
    }

    fn get(&self, key: &str) -> Option<&Value> {
        self.0.as_ref().and_then(|v| v.get(key))
    }

    pub fn f64(&self, key: &str, flag: Option<f64>, default: f64) -> f64 {
        flag.or_else(|| self.get(key).and_then(Value::as_f64)).unwrap_or(default)
    }

    pub fn u64(&self, key: &str, flag: Option<u64>, default: u64) -> u64 {
        flag.or_else(|| self.get(key).and_then(Value::as_u64)).unwrap_or(default)
    }

    pub fn usize(&self, key: &str, flag: Option<usize>, default: usize) -> usize {
        flag.or_else(|| self.get(key).and_then(|v| v.as_u64().map(|u| u as usize)))
            .unwrap_or(default)
    }

    pub fn usize_opt(&self, key: &str, flag: Option<usize>) -> Option<usize> {
        flag.or_else(|| self.get(key).and_then(|v| v.as_u64().map(|u| u as usize)))
    }

    pub fn bool(&self, key: &str, flag: Option<bool>, default: bool) -> bool {
        flag.or_else(|| self.get(key).and_then(Value::as_bool)).unwrap_or(default)
    }

    pub fn string(&self, key: &str, flag: Option<String>, default: &str) -> String {
        flag.or_else(|| self.get(key).and_then(|v| v.as_str().map(String::from)))
            .unwrap_or_else(|| default.to_string())
    }

    pub fn string_opt(&self, key: &str, flag: Option<String>) -> Option<String> {
        flag.or_else(|| self.get(key).and_then(|v| v.as_str().map(String::from)))
    }

    pub fn path_opt(&self, key: &str, flag: Option<PathBuf>) -> Option<PathBuf> {
        flag.or_else(|| self.get(key).and_then(|v| v.as_str().map(PathBuf::from)))
    }
}
