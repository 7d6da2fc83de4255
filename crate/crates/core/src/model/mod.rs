//! Minimal Pre-LN decoder-only transformer (GPT-2 shaped), addressable per
//! compression group.
//!
//! Weight matrices are stored (out, in) so every forward site is `y = W x + b`.
//! The fused attention projection is kept split per head: each layer holds
//! `n_heads` Q/K/V matrices of shape (d_head, d_model), which is what lets
//! the harness compress and track per-head matrices individually.

mod forward;
mod io;

pub use forward::{
    build_approx_model, capture_calibration, forward, gelu, layer_norm_rows, layernorm_jacobian,
    ln_vec, perplexity, ApproxModel, CalibrationCapture, CompressionPlan, ForwardOpts,
    ForwardOutput, GroupCompression, HiddenStates,
};
pub use io::{load_weights, save_weights};

use crate::error::{Error, Result};
use crate::groups::{ComponentType, CompressionGroup, MatrixId};
use crate::linalg::{fnv1a64_init, fnv1a64_u64, Matrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const GPT2_LN_EPSILON: f64 = 1e-5;
pub const DEFAULT_CHUNK_LEN: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    #[serde(
        rename = "ln_epsilon",
        default = "default_ln_eps_bits",
        with = "f64_bits"
    )]
    pub ln_epsilon_bits: u64,
}

fn default_ln_eps_bits() -> u64 {
    GPT2_LN_EPSILON.to_bits()
}

// ln_epsilon round-trips through reports bit-exactly via its bit pattern.
mod f64_bits {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(bits: &u64, s: S) -> Result<S::Ok, S::Error> {
        f64::from_bits(*bits).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        Ok(f64::deserialize(d)?.to_bits())
    }
}

impl ModelConfig {
    pub fn new(
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        d_mlp: usize,
        vocab_size: usize,
        max_positions: usize,
    ) -> Self {
        Self {
            n_layers,
            d_model,
            n_heads,
            d_head: if n_heads > 0 { d_model / n_heads } else { 0 },
            d_mlp,
            vocab_size,
            max_positions,
            ln_epsilon_bits: GPT2_LN_EPSILON.to_bits(),
        }
    }

    pub fn ln_epsilon(&self) -> f64 {
        f64::from_bits(self.ln_epsilon_bits)
    }

    /// 4 layers, 64-dim, 4 heads, 256-dim MLP, vocab 101: the self-contained
    /// desk-scale model used by the randomized verification suites.
    pub fn tiny() -> Self {
        Self::new(4, 64, 4, 256, 101, 512)
    }

    /// Tiny-width model with the full 12-layer depth (72 compression groups).
    pub fn tiny_deep() -> Self {
        Self::new(12, 64, 4, 256, 101, 512)
    }

    pub fn gpt2_small() -> Self {
        Self::new(12, 768, 12, 3072, 50257, 1024)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.vocab_size == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::invalid(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.d_mlp < self.d_model {
            return Err(Error::invalid("d_mlp must be >= d_model"));
        }
        Ok(())
    }

    /// Weight matrices per layer after the per-head split: 3 * n_heads
    /// projections plus attn_proj, mlp_fc, mlp_proj.
    pub fn matrices_per_layer(&self) -> usize {
        3 * self.n_heads + 3
    }

    pub fn total_weight_matrices(&self) -> usize {
        self.n_layers * self.matrices_per_layer()
    }

    pub fn groups(&self) -> Vec<CompressionGroup> {
        CompressionGroup::all(self.n_layers)
    }

    /// (rows, cols) of each matrix in a component group.
    pub fn component_shape(&self, component: ComponentType) -> (usize, usize) {
        match component {
            ComponentType::Q | ComponentType::K | ComponentType::V => {
                (self.d_head, self.d_model)
            }
            ComponentType::AttnProj => (self.d_model, self.d_model),
            ComponentType::MlpFc => (self.d_mlp, self.d_model),
            ComponentType::MlpProj => (self.d_model, self.d_mlp),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LnParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LnParams {
    pub fn unit(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerWeights {
    pub ln1: LnParams,
    pub q: Vec<Linear>,
    pub k: Vec<Linear>,
    pub v: Vec<Linear>,
    pub attn_proj: Linear,
    pub ln2: LnParams,
    pub mlp_fc: Linear,
    pub mlp_proj: Linear,
}

/// Full model parameters. The output head is tied to the token embedding
/// transpose (GPT-2 convention); untied heads are unsupported.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub wte: Matrix,
    pub wpe: Matrix,
    pub layers: Vec<LayerWeights>,
    pub ln_f: LnParams,
}

impl ModelWeights {
    /// The weight matrices of one compression group, with per-head ids for
    /// Q/K/V.
    pub fn group_matrices(&self, group: CompressionGroup) -> Result<Vec<(MatrixId, &Matrix)>> {
        let layer = self
            .layers
            .get(group.layer)
            .ok_or_else(|| Error::InvalidTarget(format!("layer {} out of range", group.layer)))?;
        fn per_head(heads: &[Linear], group: CompressionGroup) -> Vec<(MatrixId, &Matrix)> {
            heads
                .iter()
                .enumerate()
                .map(|(h, lin)| (MatrixId::new(group, Some(h)), &lin.weight))
                .collect()
        }
        Ok(match group.component {
            ComponentType::Q => per_head(&layer.q, group),
            ComponentType::K => per_head(&layer.k, group),
            ComponentType::V => per_head(&layer.v, group),
            ComponentType::AttnProj => {
                vec![(MatrixId::new(group, None), &layer.attn_proj.weight)]
            }
            ComponentType::MlpFc => vec![(MatrixId::new(group, None), &layer.mlp_fc.weight)],
            ComponentType::MlpProj => {
                vec![(MatrixId::new(group, None), &layer.mlp_proj.weight)]
            }
        })
    }

    /// Scales every weight matrix of `group` in place (biases untouched).
    pub fn scale_group(&mut self, group: CompressionGroup, factor: f64) -> Result<()> {
        let layer = self
            .layers
            .get_mut(group.layer)
            .ok_or_else(|| Error::InvalidTarget(format!("layer {} out of range", group.layer)))?;
        let scale_all = |heads: &mut Vec<Linear>| {
            for lin in heads {
                lin.weight = lin.weight.scale(factor);
            }
        };
        match group.component {
            ComponentType::Q => scale_all(&mut layer.q),
            ComponentType::K => scale_all(&mut layer.k),
            ComponentType::V => scale_all(&mut layer.v),
            ComponentType::AttnProj => {
                layer.attn_proj.weight = layer.attn_proj.weight.scale(factor)
            }
            ComponentType::MlpFc => layer.mlp_fc.weight = layer.mlp_fc.weight.scale(factor),
            ComponentType::MlpProj => {
                layer.mlp_proj.weight = layer.mlp_proj.weight.scale(factor)
            }
        }
        Ok(())
    }

    /// Content checksum over all parameters, used to key baseline caches.
    pub fn checksum(&self) -> u64 {
        let mut h = fnv1a64_init();
        h = fnv1a64_u64(h, self.wte.checksum());
        h = fnv1a64_u64(h, self.wpe.checksum());
        for layer in &self.layers {
            for lin in layer
                .q
                .iter()
                .chain(&layer.k)
                .chain(&layer.v)
                .chain([&layer.attn_proj, &layer.mlp_fc, &layer.mlp_proj])
            {
                h = fnv1a64_u64(h, lin.weight.checksum());
                for b in &lin.bias {
                    h = fnv1a64_u64(h, b.to_bits());
                }
            }
            for v in layer
                .ln1
                .gamma
                .iter()
                .chain(&layer.ln1.beta)
                .chain(&layer.ln2.gamma)
                .chain(&layer.ln2.beta)
            {
                h = fnv1a64_u64(h, v.to_bits());
            }
        }
        for v in self.ln_f.gamma.iter().chain(&self.ln_f.beta) {
            h = fnv1a64_u64(h, v.to_bits());
        }
        h
    }
}

/// Deterministic pseudo-random initialization: Gaussian weights at scale
/// 0.02 (GPT-2 convention), zero biases, unit LayerNorms. Same seed, same
/// weights.
pub fn synth_model(config: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.02).expect("valid stddev");
    let mut gen_matrix = |rows: usize, cols: usize| {
        Matrix::from_fn(rows, cols, |_, _| normal.sample(&mut rng))
    };

    let wte = gen_matrix(config.vocab_size, config.d_model);
    let wpe = gen_matrix(config.max_positions, config.d_model);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let mut heads = |rows: usize, cols: usize, n: usize| -> Vec<Linear> {
            (0..n)
                .map(|_| Linear {
                    weight: Matrix::from_fn(rows, cols, |_, _| normal.sample(&mut rng)),
                    bias: vec![0.0; rows],
                })
                .collect()
        };
        let q = heads(config.d_head, config.d_model, config.n_heads);
        let k = heads(config.d_head, config.d_model, config.n_heads);
        let v = heads(config.d_head, config.d_model, config.n_heads);
        let attn_proj = Linear {
            weight: Matrix::from_fn(config.d_model, config.d_model, |_, _| {
                normal.sample(&mut rng)
            }),
            bias: vec![0.0; config.d_model],
        };
        let mlp_fc = Linear {
            weight: Matrix::from_fn(config.d_mlp, config.d_model, |_, _| {
                normal.sample(&mut rng)
            }),
            bias: vec![0.0; config.d_mlp],
        };
        let mlp_proj = Linear {
            weight: Matrix::from_fn(config.d_model, config.d_mlp, |_, _| {
                normal.sample(&mut rng)
            }),
            bias: vec![0.0; config.d_model],
        };
        layers.push(LayerWeights {
            ln1: LnParams::unit(config.d_model),
            q,
            k,
            v,
            attn_proj,
            ln2: LnParams::unit(config.d_model),
            mlp_fc,
            mlp_proj,
        });
    }

    Ok(ModelWeights {
        config: *config,
        wte,
        wpe,
        layers,
        ln_f: LnParams::unit(config.d_model),
    })
}

/// Token id stream evaluated in non-overlapping chunks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenDataset {
    pub ids: Vec<u32>,
    pub chunk_len: usize,
}

impl TokenDataset {
    pub fn new(ids: Vec<u32>, chunk_len: usize) -> Self {
        Self {
            ids,
            chunk_len: chunk_len.max(2),
        }
    }

    /// Loads raw little-endian u32 ids, or a JSON array when the file ends
    /// in `.json`.
    pub fn load(path: &Path, chunk_len: usize) -> Result<Self> {
        let ids = if path.extension().is_some_and(|e| e == "json") {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str::<Vec<u32>>(&text)?
        } else {
            let bytes = std::fs::read(path)?;
            if bytes.len() % 4 != 0 {
                return Err(Error::invalid(format!(
                    "token file {} has {} bytes, not a multiple of 4",
                    path.display(),
                    bytes.len()
                )));
            }
            bytes
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        Ok(Self::new(ids, chunk_len))
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Non-overlapping chunks; a trailing fragment shorter than 2 tokens is
    /// dropped because it carries no prediction target.
    pub fn chunks(&self) -> impl Iterator<Item = &[u32]> {
        self.ids.chunks(self.chunk_len).filter(|c| c.len() >= 2)
    }

    pub fn validate_for(&self, vocab_size: usize) -> Result<()> {
        for &id in &self.ids {
            if id as usize >= vocab_size {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: vocab_size,
                });
            }
        }
        Ok(())
    }

    pub fn checksum(&self) -> u64 {
        let mut h = fnv1a64_init();
        h = fnv1a64_u64(h, self.chunk_len as u64);
        for &id in &self.ids {
            h = fnv1a64_u64(h, id as u64);
        }
        h
    }
}

/// Deterministic uniform token stream for self-contained runs.
pub fn generate_tokens(vocab_size: usize, count: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new(0, vocab_size as u32);
    (0..count).map(|_| dist.sample(&mut rng)).collect()
}

/// Deterministic stream of repeated-token runs: each randomly drawn token
/// appears `run_len` times in a row, so "copy the current token" is a
/// strong predictor. Used by harness tests that need a predictable stream.
pub fn generate_repeat_tokens(
    vocab_size: usize,
    count: usize,
    run_len: usize,
    seed: u64,
) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new(0, vocab_size as u32);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let tok = dist.sample(&mut rng);
        for _ in 0..run_len.max(1) {
            if out.len() < count {
                out.push(tok);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic_per_seed() {
        let cfg = ModelConfig::tiny();
        let a = synth_model(&cfg, 1).unwrap();
        let b = synth_model(&cfg, 1).unwrap();
        let c = synth_model(&cfg, 2).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn matrix_counts_match_gpt2_split() {
        assert_eq!(ModelConfig::gpt2_small().matrices_per_layer(), 39);
        assert_eq!(ModelConfig::gpt2_small().total_weight_matrices(), 468);
        assert_eq!(ModelConfig::tiny().total_weight_matrices(), 4 * 15);
    }

    #[test]
    fn group_matrices_cover_all() {
        let cfg = ModelConfig::tiny();
        let w = synth_model(&cfg, 3).unwrap();
        let mut total = 0;
        for g in cfg.groups() {
            let ms = w.group_matrices(g).unwrap();
            for (id, m) in &ms {
                assert_eq!(id.group, g);
                assert_eq!((m.rows(), m.cols()), cfg.component_shape(g.component));
            }
            total += ms.len();
        }
        assert_eq!(total, cfg.total_weight_matrices());
        assert!(w
            .group_matrices(CompressionGroup::new(99, ComponentType::Q))
            .is_err());
    }

    #[test]
    fn scale_group_touches_only_target() {
        let cfg = ModelConfig::tiny();
        let mut w = synth_model(&cfg, 5).unwrap();
        let before_other = w.layers[1].mlp_fc.weight.clone();
        let before_target = w.layers[0].mlp_fc.weight.clone();
        w.scale_group(CompressionGroup::new(0, ComponentType::MlpFc), 10.0)
            .unwrap();
        assert_eq!(w.layers[1].mlp_fc.weight, before_other);
        assert!(w.layers[0].mlp_fc.weight.sub(&before_target.scale(10.0)).max_abs() == 0.0);
    }

    #[test]
    fn dataset_chunking() {
        let ds = TokenDataset::new((0..10).collect(), 4);
        let chunks: Vec<_> = ds.chunks().collect();
        assert_eq!(chunks.len(), 3);
        assert_eq!(chunks[2], &[8, 9]);
        // A trailing single token would carry no target.
        let ds1 = TokenDataset::new((0..9).collect(), 4);
        assert_eq!(ds1.chunks().count(), 2);
    }

    #[test]
    fn token_generation_deterministic() {
        let a = generate_tokens(101, 32, 7);
        let b = generate_tokens(101, 32, 7);
        assert_eq!(a, b);
        assert!(a.iter().all(|&t| t < 101));
    }
}
