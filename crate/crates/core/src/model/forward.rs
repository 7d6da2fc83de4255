//! The forward pass: Pre-LN blocks with causal attention, GELU (tanh
//! approximation), optional per-group approximate routing, per-layer hidden
//! state tracing, perturbation injection, and calibration capture.

use crate::approx::{ApproxLinear, BoundLedger, CacheStore, CompressMemo, CompressionConfig, StaticApprox};
use crate::error::{Error, Result};
use crate::groups::{CompressionGroup, MatrixId};
use crate::linalg::Matrix;
use crate::model::{Linear, LnParams, ModelWeights, TokenDataset};
use crate::pruning::{self, CalibrationBuffer};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// GELU, tanh approximation with GPT-2's exact constants.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

/// LayerNorm of one vector: gamma * (z - mu) / sqrt(var + eps) + beta, with
/// the biased variance (GPT-2 convention).
pub fn ln_vec(z: &[f64], params: &LnParams, eps: f64) -> Vec<f64> {
    let d = z.len() as f64;
    let mu = z.iter().sum::<f64>() / d;
    let var = z.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
    let inv_sigma = 1.0 / (var + eps).sqrt();
    z.iter()
        .zip(params.gamma.iter().zip(&params.beta))
        .map(|(v, (g, b))| g * (v - mu) * inv_sigma + b)
        .collect()
}

/// Row-wise LayerNorm over a (positions x d_model) activation matrix.
pub fn layer_norm_rows(h: &Matrix, params: &LnParams, eps: f64) -> Matrix {
    let mut out = Matrix::zeros(h.rows(), h.cols());
    for i in 0..h.rows() {
        let row = ln_vec(h.row(i), params, eps);
        out.row_mut(i).copy_from_slice(&row);
    }
    out
}

/// Analytic Jacobian of LayerNorm at `z`:
/// diag(gamma) * (1/sigma) * (I - (1/d) 11^T - ww^T / (d sigma^2)),
/// with w = z - mu and sigma^2 = var + eps. The kernel contains the all-ones
/// direction and, at eps = 0, the radial direction w.
pub fn layernorm_jacobian(z: &[f64], gamma: &[f64], eps: f64) -> Result<Matrix> {
    let d = z.len();
    if d < 2 {
        return Err(Error::invalid("layernorm_jacobian requires dim >= 2"));
    }
    if gamma.len() != d {
        return Err(Error::dims("layernorm_jacobian", format!("{d}"), format!("{}", gamma.len())));
    }
    let df = d as f64;
    let mu = z.iter().sum::<f64>() / df;
    let w: Vec<f64> = z.iter().map(|v| v - mu).collect();
    let var = w.iter().map(|v| v * v).sum::<f64>() / df;
    let sigma_sq = var + eps;
    if sigma_sq <= 0.0 {
        return Err(Error::invalid(
            "layernorm_jacobian: zero variance with eps = 0",
        ));
    }
    let inv_sigma = 1.0 / sigma_sq.sqrt();
    let mut j = Matrix::zeros(d, d);
    for i in 0..d {
        let gi = gamma[i] * inv_sigma;
        for jj in 0..d {
            let identity = if i == jj { 1.0 } else { 0.0 };
            j[(i, jj)] = gi * (identity - 1.0 / df - w[i] * w[jj] / (df * sigma_sq));
        }
    }
    Ok(j)
}

/// Per-group compression directive used when building an [`ApproxModel`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GroupCompression {
    /// Sparsify + factor + cache, with per-call composition bounds.
    Living(CompressionConfig),
    /// Weight-times-column-norm pruning; verified by the dropped-part norm.
    WandaSimplified { keep: f64 },
    /// Calibration-scored pruning; requires captured activations.
    WandaActivationAware { keep: f64 },
    /// Data-weighted low-rank replacement; requires captured activations.
    BalancedTruncation { rank: usize },
}

/// Which groups to compress and how, in deterministic group order.
pub type CompressionPlan = BTreeMap<CompressionGroup, GroupCompression>;

enum WrappedMatrix {
    Living {
        approx: Arc<ApproxLinear>,
        cache: CacheStore,
    },
    Static(Arc<StaticApprox>),
}

/// A set of wrapped matrices routed through approximate forwards. Caches are
/// per instance, so building a fresh `ApproxModel` per evaluation gives each
/// evaluation cold caches while the expensive factorizations are shared
/// through the memo.
pub struct ApproxModel {
    wrapped: HashMap<MatrixId, WrappedMatrix>,
}

impl ApproxModel {
    pub fn is_empty(&self) -> bool {
        self.wrapped.is_empty()
    }

    pub fn len(&self) -> usize {
        self.wrapped.len()
    }

    /// Modeled FLOPs per position for the wrapped matrices, (living, exact).
    pub fn flop_totals(&self) -> (u64, u64) {
        let mut living = 0;
        let mut exact = 0;
        for w in self.wrapped.values() {
            match w {
                WrappedMatrix::Living { approx, .. } => {
                    living += approx.flop_cost(crate::approx::CostMode::Living, false);
                    exact += approx.flop_cost(crate::approx::CostMode::Exact, false);
                }
                WrappedMatrix::Static(s) => {
                    // Static replacements keep a dense multiply.
                    let cost = 2 * (s.w.rows() * s.w.cols()) as u64;
                    living += cost;
                    exact += cost;
                }
            }
        }
        (living, exact)
    }
}

/// Builds the wrapped-matrix set for a plan. Living compressions go through
/// `memo`; calibration-dependent directives read captured activations from
/// `calibration`.
pub fn build_approx_model(
    weights: &ModelWeights,
    plan: &CompressionPlan,
    memo: &CompressMemo,
    calibration: Option<&CalibrationCapture>,
) -> Result<ApproxModel> {
    let mut wrapped = HashMap::new();
    for (&group, &compression) in plan {
        let matrices = weights.group_matrices(group)?;
        for (id, w) in matrices {
            let entry = match compression {
                GroupCompression::Living(cfg) => {
                    let approx = memo.get_or_compress(id, w, &cfg)?;
                    let cache = approx.new_cache();
                    WrappedMatrix::Living { approx, cache }
                }
                GroupCompression::WandaSimplified { keep } => {
                    let w_hat = pruning::wanda_simplified(w, keep)?;
                    WrappedMatrix::Static(Arc::new(StaticApprox::new(id, w.clone(), w_hat)?))
                }
                GroupCompression::WandaActivationAware { keep } => {
                    let buffer = require_calibration(calibration, group)?;
                    let w_hat = pruning::wanda_activation_aware(w, buffer, keep)?;
                    WrappedMatrix::Static(Arc::new(StaticApprox::new(id, w.clone(), w_hat)?))
                }
                GroupCompression::BalancedTruncation { rank } => {
                    let buffer = require_calibration(calibration, group)?;
                    let cov = buffer.covariance()?;
                    let w_hat = pruning::balanced_truncation(w, &cov, rank)?;
                    WrappedMatrix::Static(Arc::new(StaticApprox::new(id, w.clone(), w_hat)?))
                }
            };
            wrapped.insert(id, entry);
        }
    }
    Ok(ApproxModel { wrapped })
}

fn require_calibration<'a>(
    calibration: Option<&'a CalibrationCapture>,
    group: CompressionGroup,
) -> Result<&'a CalibrationBuffer> {
    calibration
        .and_then(|c| c.buffers.get(&group))
        .filter(|b| !b.is_empty())
        .ok_or(Error::EmptyCalibration)
}

/// Captured inputs to compression groups, one FIFO buffer per group.
#[derive(Debug, Clone)]
pub struct CalibrationCapture {
    pub buffers: BTreeMap<CompressionGroup, CalibrationBuffer>,
}

impl CalibrationCapture {
    pub fn for_groups(
        weights: &ModelWeights,
        groups: &[CompressionGroup],
        capacity: usize,
    ) -> Result<Self> {
        let mut buffers = BTreeMap::new();
        for &g in groups {
            let (_, cols) = weights.config.component_shape(g.component);
            buffers.insert(g, CalibrationBuffer::new(cols, capacity));
        }
        Ok(Self { buffers })
    }
}

/// Options for one forward call.
pub struct ForwardOpts<'a> {
    pub approx: Option<&'a mut ApproxModel>,
    pub ledger: Option<&'a mut BoundLedger>,
    pub record_hidden: bool,
    pub inject_embedding: Option<&'a Matrix>,
    pub capture: Option<&'a mut CalibrationCapture>,
}

impl<'a> ForwardOpts<'a> {
    pub fn plain() -> Self {
        Self {
            approx: None,
            ledger: None,
            record_hidden: false,
            inject_embedding: None,
            capture: None,
        }
    }
}

/// Residual-stream states recorded during a traced forward: the embedding
/// (post injection) and the state after each block's second residual add.
#[derive(Debug, Clone)]
pub struct HiddenStates {
    pub embedding: Matrix,
    pub layers: Vec<Matrix>,
}

pub struct ForwardOutput {
    pub logits: Matrix,
    pub hidden: Option<HiddenStates>,
}

struct Pass<'a> {
    approx: Option<&'a mut ApproxModel>,
    ledger: Option<&'a mut BoundLedger>,
    capture: Option<&'a mut CalibrationCapture>,
}

impl Pass<'_> {
    /// One matrix site: batched dense multiply unless the matrix is wrapped,
    /// in which case each position goes through the approximate forward.
    /// The bias is applied after either path; biases are never compressed.
    fn apply_site(&mut self, id: MatrixId, lin: &Linear, x: &Matrix) -> Result<Matrix> {
        if let Some(capture) = self.capture.as_deref_mut() {
            // Per-head Q/K/V share their input; record it once per group.
            if id.head.map_or(true, |h| h == 0) {
                if let Some(buffer) = capture.buffers.get_mut(&id.group) {
                    for r in 0..x.rows() {
                        buffer.push(x.row(r));
                    }
                }
            }
        }

        let wrapped = self.approx.as_deref_mut().and_then(|a| a.wrapped.get_mut(&id));
        let mut out = match wrapped {
            None => x.matmul_nt(&lin.weight),
            Some(WrappedMatrix::Living { approx, cache }) => {
                let mut out = Matrix::zeros(x.rows(), lin.weight.rows());
                for r in 0..x.rows() {
                    let y = approx.forward_living(x.row(r), cache, self.ledger.as_deref_mut())?;
                    out.row_mut(r).copy_from_slice(&y);
                }
                out
            }
            Some(WrappedMatrix::Static(s)) => {
                let mut out = Matrix::zeros(x.rows(), lin.weight.rows());
                for r in 0..x.rows() {
                    let y = s.forward(x.row(r), self.ledger.as_deref_mut())?;
                    out.row_mut(r).copy_from_slice(&y);
                }
                out
            }
        };
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&lin.bias) {
                *o += b;
            }
        }
        Ok(out)
    }
}

/// Full forward pass over one token sequence. Returns logits for every
/// position; hidden states are recorded post-residual per layer when
/// requested.
pub fn forward(
    weights: &ModelWeights,
    tokens: &[u32],
    opts: &mut ForwardOpts<'_>,
) -> Result<ForwardOutput> {
    let cfg = &weights.config;
    let t_len = tokens.len();
    if t_len == 0 {
        return Err(Error::invalid("forward on an empty token sequence"));
    }
    if t_len > cfg.max_positions {
        return Err(Error::invalid(format!(
            "sequence length {} exceeds max positions {}",
            t_len, cfg.max_positions
        )));
    }
    for &t in tokens {
        if t as usize >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: t,
                vocab: cfg.vocab_size,
            });
        }
    }

    let eps = cfg.ln_epsilon();
    let mut h = Matrix::zeros(t_len, cfg.d_model);
    for (pos, &tok) in tokens.iter().enumerate() {
        let wte_row = weights.wte.row(tok as usize);
        let wpe_row = weights.wpe.row(pos);
        for (j, o) in h.row_mut(pos).iter_mut().enumerate() {
            *o = wte_row[j] + wpe_row[j];
        }
    }
    if let Some(delta) = opts.inject_embedding {
        if (delta.rows(), delta.cols()) != (t_len, cfg.d_model) {
            return Err(Error::dims(
                "inject_embedding",
                format!("{}x{}", t_len, cfg.d_model),
                format!("{}x{}", delta.rows(), delta.cols()),
            ));
        }
        h = h.add(delta);
    }

    let mut hidden = opts.record_hidden.then(|| HiddenStates {
        embedding: h.clone(),
        layers: Vec::with_capacity(cfg.n_layers),
    });

    let mut pass = Pass {
        approx: opts.approx.take(),
        ledger: opts.ledger.take(),
        capture: opts.capture.take(),
    };

    let scale = 1.0 / (cfg.d_head as f64).sqrt();
    for (layer_idx, layer) in weights.layers.iter().enumerate() {
        // Attention sublayer.
        let x1 = layer_norm_rows(&h, &layer.ln1, eps);
        let mut concat = Matrix::zeros(t_len, cfg.d_model);
        for head in 0..cfg.n_heads {
            let mk = |c| MatrixId::new(CompressionGroup::new(layer_idx, c), Some(head));
            let q = pass.apply_site(mk(crate::groups::ComponentType::Q), &layer.q[head], &x1)?;
            let k = pass.apply_site(mk(crate::groups::ComponentType::K), &layer.k[head], &x1)?;
            let v = pass.apply_site(mk(crate::groups::ComponentType::V), &layer.v[head], &x1)?;

            let mut scores = q.matmul_nt(&k);
            causal_softmax_rows(&mut scores, scale);
            let ctx = scores.matmul(&v);
            let offset = head * cfg.d_head;
            for r in 0..t_len {
                concat.row_mut(r)[offset..offset + cfg.d_head].copy_from_slice(ctx.row(r));
            }
        }
        let attn_id = MatrixId::new(
            CompressionGroup::new(layer_idx, crate::groups::ComponentType::AttnProj),
            None,
        );
        let attn_out = pass.apply_site(attn_id, &layer.attn_proj, &concat)?;
        h = h.add(&attn_out);

        // MLP sublayer.
        let x2 = layer_norm_rows(&h, &layer.ln2, eps);
        let fc_id = MatrixId::new(
            CompressionGroup::new(layer_idx, crate::groups::ComponentType::MlpFc),
            None,
        );
        let mut hidden_mlp = pass.apply_site(fc_id, &layer.mlp_fc, &x2)?;
        for v in hidden_mlp.data_mut() {
            *v = gelu(*v);
        }
        let proj_id = MatrixId::new(
            CompressionGroup::new(layer_idx, crate::groups::ComponentType::MlpProj),
            None,
        );
        let mlp_out = pass.apply_site(proj_id, &layer.mlp_proj, &hidden_mlp)?;
        h = h.add(&mlp_out);

        if let Some(hs) = hidden.as_mut() {
            hs.layers.push(h.clone());
        }
    }

    opts.approx = pass.approx.take();
    opts.ledger = pass.ledger.take();
    opts.capture = pass.capture.take();

    let h_final = layer_norm_rows(&h, &weights.ln_f, eps);
    let logits = h_final.matmul_nt(&weights.wte);
    Ok(ForwardOutput { logits, hidden })
}

/// In-place causal masked softmax over score rows, with 1/sqrt(d_head)
/// scaling applied first. Position t attends to positions 0..=t.
fn causal_softmax_rows(scores: &mut Matrix, scale: f64) {
    let n = scores.rows();
    for t in 0..n {
        let row = scores.row_mut(t);
        let visible = t + 1;
        let mut max = f64::NEG_INFINITY;
        for v in row[..visible].iter_mut() {
            *v *= scale;
            max = max.max(*v);
        }
        let mut sum = 0.0;
        for v in row[..visible].iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row[..visible].iter_mut() {
            *v /= sum;
        }
        for v in row[visible..].iter_mut() {
            *v = 0.0;
        }
    }
}

/// Perplexity over the dataset's chunks: exp of the mean negative
/// log-likelihood across all predicted positions. The first position of
/// each chunk has no target; chunks do not overlap.
pub fn perplexity(
    weights: &ModelWeights,
    dataset: &TokenDataset,
    mut approx: Option<&mut ApproxModel>,
    mut ledger: Option<&mut BoundLedger>,
) -> Result<f64> {
    dataset.validate_for(weights.config.vocab_size)?;
    let mut total_nll = 0.0;
    let mut count = 0usize;
    for chunk in dataset.chunks() {
        let mut opts = ForwardOpts {
            approx: approx.as_deref_mut(),
            ledger: ledger.as_deref_mut(),
            record_hidden: false,
            inject_embedding: None,
            capture: None,
        };
        let out = forward(weights, chunk, &mut opts)?;
        for t in 1..chunk.len() {
            total_nll -= log_softmax_at(out.logits.row(t - 1), chunk[t] as usize);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("dataset has no predictable positions"));
    }
    Ok((total_nll / count as f64).exp())
}

fn log_softmax_at(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    logits[target] - lse
}

/// Runs the model over the dataset recording inputs of the given groups.
pub fn capture_calibration(
    weights: &ModelWeights,
    dataset: &TokenDataset,
    groups: &[CompressionGroup],
    capacity: usize,
) -> Result<CalibrationCapture> {
    let mut capture = CalibrationCapture::for_groups(weights, groups, capacity)?;
    for chunk in dataset.chunks() {
        let mut opts = ForwardOpts {
            approx: None,
            ledger: None,
            record_hidden: false,
            inject_embedding: None,
            capture: Some(&mut capture),
        };
        forward(weights, chunk, &mut opts)?;
    }
    Ok(capture)
}
