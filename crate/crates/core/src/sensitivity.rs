//! Ablation harness: single-layer, component-type, cumulative sweeps,
//! per-group heatmap, catastrophe threshold, and the randomized
//! zero-violation verification suite.
//!
//! All evaluations share one [`EvalContext`]: the baseline perplexity is
//! computed once per (weights, dataset) pair and expensive factorizations
//! are memoized, while every evaluation gets its own caches and ledger.
//! Targets run in parallel with one ledger per worker; results merge in
//! deterministic target order.

use crate::approx::{BoundLedger, CompressMemo, CompressionConfig, LedgerTotals};
use crate::error::{Error, Result};
use crate::groups::{ComponentType, CompressionGroup};
use crate::model::{
    build_approx_model, perplexity, CalibrationCapture, CompressionPlan, GroupCompression,
    ModelConfig, ModelWeights, TokenDataset,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::PathBuf;
use std::sync::OnceLock;

/// Shared evaluation state for one (weights, dataset) pair.
pub struct EvalContext<'a> {
    pub weights: &'a ModelWeights,
    pub dataset: &'a TokenDataset,
    memo: CompressMemo,
    calibration: Option<CalibrationCapture>,
    baseline: OnceLock<f64>,
}

/// Outcome of evaluating one compression plan.
#[derive(Debug, Clone, Copy)]
pub struct EvalOutcome {
    pub ppl: f64,
    pub ledger: LedgerTotals,
}

impl<'a> EvalContext<'a> {
    pub fn new(weights: &'a ModelWeights, dataset: &'a TokenDataset) -> Self {
        Self {
            weights,
            dataset,
            memo: CompressMemo::new(),
            calibration: None,
            baseline: OnceLock::new(),
        }
    }

    /// Enables the on-disk SVD factor cache (one file per matrix/config).
    pub fn with_disk_cache(mut self, dir: PathBuf) -> Self {
        self.memo = CompressMemo::with_disk_dir(dir);
        self
    }

    pub fn with_calibration(mut self, calibration: CalibrationCapture) -> Self {
        self.calibration = Some(calibration);
        self
    }

    pub fn config(&self) -> &ModelConfig {
        &self.weights.config
    }

    pub fn memo(&self) -> &CompressMemo {
        &self.memo
    }

    /// Uncompressed perplexity, computed once and cached. The cache key is
    /// implicit: a context is bound to one weights/dataset pair (checksums
    /// are exposed for report provenance).
    pub fn baseline_ppl(&self) -> Result<f64> {
        if let Some(v) = self.baseline.get() {
            return Ok(*v);
        }
        let v = perplexity(self.weights, self.dataset, None, None)?;
        let _ = self.baseline.set(v);
        Ok(v)
    }

    /// Evaluates one plan with a fresh approximate model and ledger.
    pub fn evaluate(&self, plan: &CompressionPlan) -> Result<EvalOutcome> {
        let mut approx =
            build_approx_model(self.weights, plan, &self.memo, self.calibration.as_ref())?;
        let mut ledger = BoundLedger::totals_only();
        let ppl = perplexity(
            self.weights,
            self.dataset,
            Some(&mut approx),
            Some(&mut ledger),
        )?;
        Ok(EvalOutcome {
            ppl,
            ledger: ledger.totals(),
        })
    }

    fn record_for(&self, target: String, outcome: EvalOutcome, baseline: f64) -> RegretRecord {
        RegretRecord {
            target,
            ppl: outcome.ppl,
            regret: outcome.ppl - baseline,
            degradation: outcome.ppl / baseline,
            ledger: outcome.ledger,
        }
    }
}

/// One ablation outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegretRecord {
    pub target: String,
    pub ppl: f64,
    pub regret: f64,
    pub degradation: f64,
    pub ledger: LedgerTotals,
}

/// What to ablate. Cumulative kinds accumulate whole layers in order;
/// `Groups` evaluates singleton groups (the heatmap path).
#[derive(Debug, Clone)]
pub enum AblationPlan {
    SingleLayer {
        layers: Vec<usize>,
        cfg: CompressionConfig,
    },
    ComponentType {
        components: Vec<ComponentType>,
        cfg: CompressionConfig,
    },
    CumulativeForward {
        cfg: CompressionConfig,
    },
    CumulativeBackward {
        cfg: CompressionConfig,
    },
    LevelSweep {
        layer: usize,
        levels: Vec<CompressionConfig>,
    },
    Groups {
        groups: Vec<CompressionGroup>,
        cfg: CompressionConfig,
    },
}

/// The rank knob is clamped per group to the group's matrix shape, so one
/// sweep config applies across differently shaped components.
pub fn clamped_living(config: &ModelConfig, group: CompressionGroup, cfg: &CompressionConfig) -> GroupCompression {
    let (rows, cols) = config.component_shape(group.component);
    let mut cfg = *cfg;
    cfg.rank = cfg.rank.min(rows.min(cols));
    GroupCompression::Living(cfg)
}

fn living_plan(
    config: &ModelConfig,
    groups: impl IntoIterator<Item = CompressionGroup>,
    cfg: &CompressionConfig,
) -> CompressionPlan {
    groups
        .into_iter()
        .map(|g| (g, clamped_living(config, g, cfg)))
        .collect()
}

fn layer_groups(layer: usize) -> Vec<CompressionGroup> {
    ComponentType::ALL
        .iter()
        .map(|&c| CompressionGroup::new(layer, c))
        .collect()
}

impl AblationPlan {
    /// Expands the plan into (target label, compression plan) pairs,
    /// validating every target against the model before any evaluation.
    pub fn expand(&self, config: &ModelConfig) -> Result<Vec<(String, CompressionPlan)>> {
        let n = config.n_layers;
        let check_layer = |l: usize| -> Result<()> {
            if l >= n {
                Err(Error::InvalidTarget(format!(
                    "layer {l} out of range for {n}-layer model"
                )))
            } else {
                Ok(())
            }
        };
        match self {
            AblationPlan::SingleLayer { layers, cfg } => {
                cfg.validate()?;
                layers.iter().try_for_each(|&l| check_layer(l))?;
                Ok(layers
                    .iter()
                    .map(|&l| {
                        (
                            format!("layer{l}"),
                            living_plan(config, layer_groups(l), cfg),
                        )
                    })
                    .collect())
            }
            AblationPlan::ComponentType { components, cfg } => {
                cfg.validate()?;
                Ok(components
                    .iter()
                    .map(|&c| {
                        let groups = (0..n).map(move |l| CompressionGroup::new(l, c));
                        (c.name().to_string(), living_plan(config, groups, cfg))
                    })
                    .collect())
            }
            AblationPlan::CumulativeForward { cfg } => {
                cfg.validate()?;
                Ok((0..n)
                    .map(|upto| {
                        let groups = (0..=upto).flat_map(layer_groups);
                        (
                            format!("L0..=L{upto}"),
                            living_plan(config, groups, cfg),
                        )
                    })
                    .collect())
            }
            AblationPlan::CumulativeBackward { cfg } => {
                cfg.validate()?;
                Ok((0..n)
                    .map(|i| {
                        let from = n - 1 - i;
                        let groups = (from..n).flat_map(layer_groups);
                        (
                            format!("L{from}..=L{}", n - 1),
                            living_plan(config, groups, cfg),
                        )
                    })
                    .collect())
            }
            AblationPlan::LevelSweep { layer, levels } => {
                check_layer(*layer)?;
                levels.iter().try_for_each(|c| c.validate())?;
                Ok(levels
                    .iter()
                    .map(|cfg| {
                        (
                            format!("layer{layer}@k={},r={}", cfg.keep_fraction, cfg.rank),
                            living_plan(config, layer_groups(*layer), cfg),
                        )
                    })
                    .collect())
            }
            AblationPlan::Groups { groups, cfg } => {
                cfg.validate()?;
                groups
                    .iter()
                    .try_for_each(|g| check_layer(g.layer))?;
                Ok(groups
                    .iter()
                    .map(|&g| (g.to_string(), living_plan(config, [g], cfg)))
                    .collect())
            }
        }
    }
}

/// Runs an ablation plan: one record per target, evaluated in parallel and
/// reported in target order.
pub fn run_ablation(ctx: &EvalContext<'_>, plan: &AblationPlan) -> Result<Vec<RegretRecord>> {
    let targets = plan.expand(ctx.config())?;
    let baseline = ctx.baseline_ppl()?;
    let outcomes: Vec<Result<(String, EvalOutcome)>> = targets
        .into_par_iter()
        .map(|(label, plan)| Ok((label, ctx.evaluate(&plan)?)))
        .collect();
    let mut records = Vec::with_capacity(outcomes.len());
    for outcome in outcomes {
        let (label, o) = outcome?;
        debug_assert_eq!(o.ledger.violations, 0, "bound violation at {label}");
        records.push(ctx.record_for(label, o, baseline));
    }
    Ok(records)
}

/// Per-group regret matrix, layers ascending by row, components in the
/// fixed order Q, K, V, attn_proj, mlp_fc, mlp_proj.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Heatmap {
    pub baseline_ppl: f64,
    pub components: Vec<String>,
    /// regret[layer][component]
    pub regret: Vec<Vec<f64>>,
    pub ledger: LedgerTotals,
}

impl Heatmap {
    /// The (group, regret) cell with maximal regret.
    pub fn max_cell(&self) -> (CompressionGroup, f64) {
        let mut best = (CompressionGroup::new(0, ComponentType::Q), f64::NEG_INFINITY);
        for (l, row) in self.regret.iter().enumerate() {
            for (c, &r) in row.iter().enumerate() {
                if r > best.1 {
                    best = (CompressionGroup::new(l, ComponentType::ALL[c]), r);
                }
            }
        }
        best
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer");
        for c in &self.components {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (l, row) in self.regret.iter().enumerate() {
            out.push_str(&l.to_string());
            for v in row {
                out.push(',');
                out.push_str(&format!("{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Compresses each group alone and reports the regret landscape. Cells go
/// through the same code path as singleton ablation runs.
pub fn heatmap(ctx: &EvalContext<'_>, cfg: &CompressionConfig) -> Result<Heatmap> {
    let groups = ctx.config().groups();
    let records = run_ablation(
        ctx,
        &AblationPlan::Groups {
            groups: groups.clone(),
            cfg: *cfg,
        },
    )?;
    let n = ctx.config().n_layers;
    let mut regret = vec![vec![0.0; 6]; n];
    let mut ledger = LedgerTotals::default();
    for (group, record) in groups.iter().zip(&records) {
        let comp_idx = ComponentType::ALL
            .iter()
            .position(|c| *c == group.component)
            .unwrap();
        regret[group.layer][comp_idx] = record.regret;
        ledger.merge(&record.ledger);
    }
    Ok(Heatmap {
        baseline_ppl: ctx.baseline_ppl()?,
        components: ComponentType::ALL.iter().map(|c| c.name().into()).collect(),
        regret,
        ledger,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdPoint {
    pub sparsity: f64,
    pub ppl: f64,
    pub regret: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub layer: usize,
    pub regret_cap: f64,
    pub baseline_ppl: f64,
    /// Largest grid sparsity with regret below the cap; `None` when even the
    /// grid minimum exceeds it.
    pub tau: Option<f64>,
    pub points: Vec<ThresholdPoint>,
    pub ledger: LedgerTotals,
}

/// Sweeps Wanda sparsity on one layer and reports the catastrophe threshold
/// tau. The grid is scanned in full; regret is not assumed monotone.
pub fn catastrophe_threshold(
    ctx: &EvalContext<'_>,
    layer: usize,
    sparsity_grid: &[f64],
    regret_cap: f64,
) -> Result<ThresholdReport> {
    if layer >= ctx.config().n_layers {
        return Err(Error::InvalidTarget(format!("layer {layer} out of range")));
    }
    if !(regret_cap > 0.0) {
        return Err(Error::invalid("regret_cap must be > 0"));
    }
    if sparsity_grid.is_empty()
        || sparsity_grid.windows(2).any(|w| w[0] >= w[1])
        || sparsity_grid.iter().any(|&s| !(0.0 < s && s < 1.0))
    {
        return Err(Error::invalid(
            "sparsity grid must be strictly ascending within (0, 1)",
        ));
    }

    let baseline = ctx.baseline_ppl()?;
    let outcomes: Vec<Result<EvalOutcome>> = sparsity_grid
        .par_iter()
        .map(|&sparsity| {
            let plan: CompressionPlan = layer_groups(layer)
                .into_iter()
                .map(|g| (g, GroupCompression::WandaSimplified { keep: 1.0 - sparsity }))
                .collect();
            ctx.evaluate(&plan)
        })
        .collect();

    let mut points = Vec::with_capacity(sparsity_grid.len());
    let mut ledger = LedgerTotals::default();
    let mut tau = None;
    for (&sparsity, outcome) in sparsity_grid.iter().zip(outcomes) {
        let o = outcome?;
        let regret = o.ppl - baseline;
        if regret < regret_cap {
            tau = Some(sparsity);
        }
        ledger.merge(&o.ledger);
        points.push(ThresholdPoint {
            sparsity,
            ppl: o.ppl,
            regret,
        });
    }
    Ok(ThresholdReport {
        layer,
        regret_cap,
        baseline_ppl: baseline,
        tau,
        points,
        ledger,
    })
}

/// One randomized trial of the zero-violation suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyTrial {
    pub group: CompressionGroup,
    pub keep_fraction: f64,
    pub rank: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyOutcome {
    pub trials: usize,
    pub ledger: LedgerTotals,
}

/// Draws `trials` random (group, k, r, delta) configurations and runs each
/// over the dataset with full bound tracking. Trial parameters come from
/// the seed alone; evaluation order does not affect the outcome.
pub fn verify_bounds(
    weights: &ModelWeights,
    dataset: &TokenDataset,
    trials: usize,
    seed: u64,
) -> Result<VerifyOutcome> {
    let config = &weights.config;
    let groups = config.groups();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs: Vec<VerifyTrial> = (0..trials)
        .map(|_| {
            let group = groups[rng.gen_range(0..groups.len())];
            let (rows, cols) = config.component_shape(group.component);
            let max_rank = rows.min(cols);
            VerifyTrial {
                group,
                keep_fraction: rng.gen_range(0.01..=1.0),
                rank: rng.gen_range(1..=max_rank),
                delta: rng.gen_range(0.0..=0.5),
            }
        })
        .collect();

    let totals: Vec<Result<LedgerTotals>> = specs
        .par_iter()
        .map(|spec| {
            let mut cfg = CompressionConfig::new(spec.keep_fraction, spec.rank, spec.delta);
            cfg.cache_capacity = 256;
            let plan: CompressionPlan =
                [(spec.group, GroupCompression::Living(cfg))].into_iter().collect();
            // No shared memo: random configs never repeat, and dropping the
            // factorization after each trial keeps memory flat.
            let local = CompressMemo::new();
            let mut approx = build_approx_model(weights, &plan, &local, None)?;
            let mut ledger = BoundLedger::totals_only();
            perplexity(weights, dataset, Some(&mut approx), Some(&mut ledger))?;
            Ok(ledger.totals())
        })
        .collect();

    let mut merged = LedgerTotals::default();
    for t in totals {
        merged.merge(&t?);
    }
    Ok(VerifyOutcome {
        trials,
        ledger: merged,
    })
}

/// Offset used by the successor-token oracle: the planted model is built to
/// predict `(t + 3) mod vocab` after token `t`.
pub const PLANTED_SUCCESSOR_OFFSET: u32 = 3;

/// Deterministic successor-chain token stream `t, pi(t), pi^2(t), ...` for
/// the planted oracle model, with pi(t) = t + offset mod vocab.
pub fn successor_tokens(vocab_size: usize, count: usize, seed: u64) -> Vec<u32> {
    let mut tok = (seed % vocab_size as u64) as u32;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(tok);
        tok = (tok + PLANTED_SUCCESSOR_OFFSET) % vocab_size as u32;
    }
    out
}

/// Synthetic model with a ground-truth sensitivity ordering: one group is
/// made load-bearing and scaled up (10x by convention), so compressing it
/// destroys the model's predictive function while every other group carries
/// only initialization noise.
///
/// Scaling a random group alone does not produce a usable ordering at desk
/// scale: a random-weight model's perplexity barely responds to corruption,
/// and pruning an amplified noise source can even help. Instead the planted
/// layer is wired as a successor-prediction channel evaluated on
/// [`successor_tokens`] streams:
///
///  - value projections are identity slices and Q = K per head, so each
///    position attends to itself and `attn_proj` sees the normalized
///    residual stream (which carries the boosted token embedding);
///  - the planted `attn_proj` applies a least-squares successor transform
///    `T` with `T wte_t ~ wte_{pi(t)}`, then gets the 10x group scaling
///    that makes the channel dominate the readout.
///
/// The in-series partners (per-head Q/K/V, shape d_head x d_model) are
/// exactly full-rank-compressible, so under a rank clamp of d_head they are
/// lossless and cannot tie with the planted group.
///
/// Only `attn_proj` groups can host the channel; other components are in
/// series with a partner that cannot be made compression-transparent.
pub fn planted_model(
    config: &ModelConfig,
    seed: u64,
    planted: CompressionGroup,
    factor: f64,
) -> Result<ModelWeights> {
    if planted.component != ComponentType::AttnProj {
        return Err(Error::InvalidTarget(
            "the planted oracle hosts its channel in an attn_proj group".into(),
        ));
    }
    let mut weights = crate::model::synth_model(config, seed)?;
    if planted.layer >= config.n_layers {
        return Err(Error::InvalidTarget(format!(
            "layer {} out of range",
            planted.layer
        )));
    }

    // Strong token-identity channel, weak position pollution.
    weights.wte = weights.wte.scale(6.0);
    weights.wpe = weights.wpe.scale(0.25);

    let d = config.d_model;
    let dh = config.d_head;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x517c_c1b7_2722_0a95);
    {
        let layer = &mut weights.layers[planted.layer];
        for head in 0..config.n_heads {
            // Shared Q = K projection gives every position its strongest
            // affinity with itself, pinning attention near the diagonal.
            let r = crate::linalg::Matrix::from_fn(dh, d, |_, _| rng.gen_range(-0.45..0.45));
            layer.q[head].weight = r.clone();
            layer.k[head].weight = r;
            // Identity-slice values: concatenated heads reproduce ln1(h).
            layer.v[head].weight = crate::linalg::Matrix::from_fn(dh, d, |i, j| {
                if j == head * dh + i {
                    1.0
                } else {
                    0.0
                }
            });
        }
        // Successor transform, pre-divided by the group scaling applied
        // below and by the LayerNorm output magnitude sqrt(d).
        let t = successor_transform(&weights.wte, config)?;
        let channel_gain = 24.0;
        layer.attn_proj.weight = t.scale(channel_gain / (factor * (d as f64).sqrt()));
    }
    weights.scale_group(planted, factor)?;
    Ok(weights)
}

/// Least-squares map T with T ln(wte_t) ~ wte_{pi(t)} over the vocabulary.
fn successor_transform(
    wte: &crate::linalg::Matrix,
    config: &ModelConfig,
) -> Result<crate::linalg::Matrix> {
    let d = config.d_model;
    let vocab = config.vocab_size;
    let unit = crate::model::LnParams::unit(d);
    let eps = config.ln_epsilon();
    // Inputs as the forward pass will see them: unit-LayerNormed rows.
    let inputs: Vec<Vec<f64>> = (0..vocab)
        .map(|t| crate::model::ln_vec(wte.row(t), &unit, eps))
        .collect();

    let mut gram = crate::linalg::Matrix::zeros(d, d);
    let mut cross = crate::linalg::Matrix::zeros(d, d);
    for t in 0..vocab {
        let target = wte.row((t + PLANTED_SUCCESSOR_OFFSET as usize) % vocab);
        let x = &inputs[t];
        for i in 0..d {
            for j in 0..d {
                gram[(i, j)] += x[i] * x[j];
                cross[(i, j)] += target[i] * x[j];
            }
        }
    }
    let ridge = 1e-6 * (0..d).map(|i| gram[(i, i)]).sum::<f64>() / d as f64;
    for i in 0..d {
        gram[(i, i)] += ridge;
    }
    // T = cross * gram^{-1} via the symmetric eigendecomposition.
    let (values, q) = crate::linalg::sym_eigen(&gram)?;
    let floor = values[0] * 1e-12;
    let mut inv = crate::linalg::Matrix::zeros(d, d);
    for k in 0..d {
        if values[k] <= floor {
            continue;
        }
        let ik = 1.0 / values[k];
        for i in 0..d {
            let qik = q[(i, k)] * ik;
            for j in 0..d {
                inv[(i, j)] += qik * q[(j, k)];
            }
        }
    }
    Ok(cross.matmul(&inv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_tokens, synth_model};

    fn tiny_setup() -> (ModelWeights, TokenDataset) {
        let w = synth_model(&ModelConfig::tiny(), 1).unwrap();
        let ds = TokenDataset::new(generate_tokens(101, 96, 5), 48);
        (w, ds)
    }

    #[test]
    fn identity_config_has_zero_regret() {
        let (w, ds) = tiny_setup();
        let ctx = EvalContext::new(&w, &ds);
        // Identity knobs: keep everything, rank clamps to full per group.
        let cfg = CompressionConfig::new(1.0, usize::MAX, 0.0);
        let records = run_ablation(
            &ctx,
            &AblationPlan::Groups {
                groups: vec![CompressionGroup::new(2, ComponentType::AttnProj)],
                cfg,
            },
        )
        .unwrap();
        assert!(records[0].regret.abs() < 1e-6 * records[0].ppl);
        assert_eq!(records[0].ledger.violations, 0);
    }

    #[test]
    fn invalid_target_fails_before_evaluation() {
        let (w, ds) = tiny_setup();
        let ctx = EvalContext::new(&w, &ds);
        let err = run_ablation(
            &ctx,
            &AblationPlan::SingleLayer {
                layers: vec![0, 9],
                cfg: CompressionConfig::new(0.5, 2, 0.0),
            },
        );
        assert!(matches!(err, Err(Error::InvalidTarget(_))));
    }

    #[test]
    fn cumulative_endpoints_agree() {
        let (w, ds) = tiny_setup();
        let ctx = EvalContext::new(&w, &ds);
        let cfg = CompressionConfig::new(0.3, 4, 0.0);
        let fwd = run_ablation(&ctx, &AblationPlan::CumulativeForward { cfg }).unwrap();
        let bwd = run_ablation(&ctx, &AblationPlan::CumulativeBackward { cfg }).unwrap();
        // After all layers the wrapped sets coincide.
        let f_final = fwd.last().unwrap().ppl;
        let b_final = bwd.last().unwrap().ppl;
        assert!(
            (f_final - b_final).abs() <= 1e-9 * f_final,
            "forward {f_final} vs backward {b_final}"
        );
    }

    #[test]
    fn heatmap_matches_singleton_ablation() {
        let (w, ds) = tiny_setup();
        let ctx = EvalContext::new(&w, &ds);
        let cfg = CompressionConfig::new(0.2, 2, 0.0);
        let hm = heatmap(&ctx, &cfg).unwrap();
        let g = CompressionGroup::new(1, ComponentType::MlpFc);
        let record = run_ablation(
            &ctx,
            &AblationPlan::Groups {
                groups: vec![g],
                cfg,
            },
        )
        .unwrap();
        let cell = hm.regret[1][4]; // mlp_fc column
        assert!(
            (cell - record[0].regret).abs() <= 1e-12 * cell.abs().max(1.0),
            "heatmap {cell} vs ablation {}",
            record[0].regret
        );
        assert_eq!(hm.ledger.violations, 0);
    }

    #[test]
    fn heatmap_csv_layout() {
        let hm = Heatmap {
            baseline_ppl: 10.0,
            components: ComponentType::ALL.iter().map(|c| c.name().into()).collect(),
            regret: vec![vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]],
            ledger: LedgerTotals::default(),
        };
        let csv = hm.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "layer,Q,K,V,attn_proj,mlp_fc,mlp_proj"
        );
        assert_eq!(lines.next().unwrap(), "0,0,1,2,3,4,5");
    }

    #[test]
    fn threshold_scan_reports_tau() {
        let (w, ds) = tiny_setup();
        let ctx = EvalContext::new(&w, &ds);
        // With an effectively infinite cap every sparsity passes: tau = max.
        let report =
            catastrophe_threshold(&ctx, 0, &[0.3, 0.6, 0.9], f64::INFINITY).unwrap();
        assert_eq!(report.tau, Some(0.9));
        assert_eq!(report.points.len(), 3);
        assert_eq!(report.ledger.violations, 0);

        // A cap below every regret reports tau as below the grid minimum,
        // unless some regret is genuinely tiny; use a negative-impossible cap
        // via the smallest positive value.
        let tight = catastrophe_threshold(&ctx, 0, &[0.3, 0.6, 0.9], f64::MIN_POSITIVE).unwrap();
        if tight.points.iter().all(|p| p.regret >= f64::MIN_POSITIVE) {
            assert_eq!(tight.tau, None);
        }
    }

    #[test]
    fn threshold_grid_validation() {
        let (w, ds) = tiny_setup();
        let ctx = EvalContext::new(&w, &ds);
        assert!(catastrophe_threshold(&ctx, 0, &[0.5, 0.4], 10.0).is_err());
        assert!(catastrophe_threshold(&ctx, 0, &[], 10.0).is_err());
        assert!(catastrophe_threshold(&ctx, 0, &[0.5, 1.0], 10.0).is_err());
        assert!(catastrophe_threshold(&ctx, 9, &[0.5], 10.0).is_err());
    }

    #[test]
    fn verify_bounds_small_run_is_clean_and_deterministic() {
        let w = synth_model(&ModelConfig::tiny(), 1).unwrap();
        let ds = TokenDataset::new(generate_tokens(101, 64, 2), 64);
        let a = verify_bounds(&w, &ds, 12, 42).unwrap();
        let b = verify_bounds(&w, &ds, 12, 42).unwrap();
        assert_eq!(a.ledger.violations, 0);
        assert_eq!(a.ledger.calls, b.ledger.calls);
        assert_eq!(a.ledger.max_ratio.to_bits(), b.ledger.max_ratio.to_bits());
        assert!(a.ledger.max_ratio <= 1.0);
    }

    #[test]
    fn planted_model_structure() {
        let cfg = ModelConfig::tiny();
        let base = synth_model(&cfg, 7).unwrap();
        let group = CompressionGroup::new(0, ComponentType::AttnProj);
        let planted = planted_model(&cfg, 7, group, 10.0).unwrap();
        // Layers outside the planted one keep their synth weights.
        assert_eq!(
            base.layers[1].attn_proj.weight,
            planted.layers[1].attn_proj.weight
        );
        assert_eq!(base.layers[2].mlp_fc.weight, planted.layers[2].mlp_fc.weight);
        // Q = K per head, identity-slice values.
        assert_eq!(planted.layers[0].q[1].weight, planted.layers[0].k[1].weight);
        let v0 = &planted.layers[0].v[2].weight;
        assert_eq!(v0.nnz(), cfg.d_head);
        assert_eq!(v0[(3, 2 * cfg.d_head + 3)], 1.0);
        // Only attn_proj groups host the channel.
        assert!(planted_model(
            &cfg,
            7,
            CompressionGroup::new(0, ComponentType::MlpFc),
            10.0
        )
        .is_err());
    }

    #[test]
    fn successor_tokens_follow_the_chain() {
        let toks = successor_tokens(101, 10, 42);
        for w in toks.windows(2) {
            assert_eq!(w[1], (w[0] + PLANTED_SUCCESSOR_OFFSET) % 101);
        }
    }
}
