//! Greedy sequential compression, the compression fragility index, and
//! rank-correlation utilities for Lyapunov-budget analysis.

use crate::approx::{CostMode, LedgerTotals};
use crate::error::{Error, Result};
use crate::groups::CompressionGroup;
use crate::model::GroupCompression;
use crate::sensitivity::{clamped_living, EvalContext};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// One committed greedy round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GreedyRound {
    pub round: usize,
    pub group: CompressionGroup,
    pub label: String,
    pub ppl: f64,
    pub regret_added: f64,
    pub flops_saved_fraction: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GreedyCurve {
    pub baseline_ppl: f64,
    pub reevaluate: bool,
    pub rounds: Vec<GreedyRound>,
    pub ledger: LedgerTotals,
}

/// Greedy sequential compression: each round commits the remaining group
/// whose compression on top of the committed set costs the least
/// perplexity; ties break in (layer, component) order.
///
/// With `reevaluate` off, candidates are scored once against the baseline
/// and committed in that static order (the curve still reports the
/// cumulative perplexity per round).
pub fn greedy(
    ctx: &EvalContext<'_>,
    cfg: &crate::approx::CompressionConfig,
    rounds: usize,
    reevaluate: bool,
) -> Result<GreedyCurve> {
    let config = ctx.config();
    let all_groups = config.groups();
    if rounds > all_groups.len() {
        return Err(Error::invalid(format!(
            "rounds {rounds} exceeds group count {}",
            all_groups.len()
        )));
    }
    cfg.validate()?;
    let baseline = ctx.baseline_ppl()?;

    // Dense forward FLOPs over every group matrix: the savings denominator.
    let mut total_dense: u64 = 0;
    for &g in &all_groups {
        for (_, m) in ctx.weights.group_matrices(g)? {
            total_dense += 2 * (m.rows() * m.cols()) as u64;
        }
    }

    let mut ledger = LedgerTotals::default();
    let mut committed: Vec<CompressionGroup> = Vec::new();
    let mut remaining: Vec<CompressionGroup> = all_groups.clone();
    let mut curve = Vec::with_capacity(rounds);
    let mut prev_ppl = baseline;
    let mut saved: u64 = 0;

    let static_order: Option<Vec<CompressionGroup>> = if reevaluate {
        None
    } else {
        let outcomes: Vec<Result<(CompressionGroup, f64, LedgerTotals)>> = remaining
            .par_iter()
            .map(|&g| {
                let plan = [(g, clamped_living(config, g, cfg))].into_iter().collect();
                let o = ctx.evaluate(&plan)?;
                Ok((g, o.ppl, o.ledger))
            })
            .collect();
        let mut scored = Vec::with_capacity(outcomes.len());
        for o in outcomes {
            let (g, ppl, totals) = o?;
            ledger.merge(&totals);
            scored.push((ppl, g));
        }
        scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        Some(scored.into_iter().map(|(_, g)| g).collect())
    };

    for round in 1..=rounds {
        let chosen = match &static_order {
            Some(order) => {
                let g = order[round - 1];
                let plan = plan_for(config, &committed, Some(g), cfg);
                let o = ctx.evaluate(&plan)?;
                ledger.merge(&o.ledger);
                (g, o.ppl)
            }
            None => {
                let outcomes: Vec<Result<(CompressionGroup, f64, LedgerTotals)>> = remaining
                    .par_iter()
                    .map(|&g| {
                        let plan = plan_for(config, &committed, Some(g), cfg);
                        let o = ctx.evaluate(&plan)?;
                        Ok((g, o.ppl, o.ledger))
                    })
                    .collect();
                let mut best: Option<(CompressionGroup, f64)> = None;
                for o in outcomes {
                    let (g, ppl, totals) = o?;
                    ledger.merge(&totals);
                    // Strict less-than over the canonical candidate order
                    // makes ties deterministic.
                    if best.map_or(true, |(_, b)| ppl < b) {
                        best = Some((g, ppl));
                    }
                }
                best.ok_or_else(|| Error::invalid("no remaining candidates"))?
            }
        };

        let (group, ppl) = chosen;
        committed.push(group);
        remaining.retain(|&g| g != group);

        // Per-group modeled savings at miss cost, never negative.
        for (id, m) in ctx.weights.group_matrices(group)? {
            let GroupCompression::Living(cfg_g) = clamped_living(config, group, cfg) else {
                unreachable!()
            };
            let approx = ctx.memo().get_or_compress(id, m, &cfg_g)?;
            let exact = approx.flop_cost(CostMode::Exact, false);
            let living = approx.flop_cost(CostMode::Living, false);
            saved += exact.saturating_sub(living);
        }

        curve.push(GreedyRound {
            round,
            group,
            label: group.to_string(),
            ppl,
            regret_added: ppl - prev_ppl,
            flops_saved_fraction: saved as f64 / total_dense as f64,
        });
        prev_ppl = ppl;
    }

    Ok(GreedyCurve {
        baseline_ppl: baseline,
        reevaluate,
        rounds: curve,
        ledger,
    })
}

fn plan_for(
    config: &crate::model::ModelConfig,
    committed: &[CompressionGroup],
    candidate: Option<CompressionGroup>,
    cfg: &crate::approx::CompressionConfig,
) -> crate::model::CompressionPlan {
    committed
        .iter()
        .copied()
        .chain(candidate)
        .map(|g| (g, clamped_living(config, g, cfg)))
        .collect()
}

/// Inputs to the compression fragility index.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CfiInputs {
    /// Fraction of amplifying inter-layer transitions.
    pub f_amp: f64,
    pub layers: usize,
    pub rho_max: f64,
    pub d_model: usize,
    /// Width-penalty constant; 2000 unless overridden.
    pub c: f64,
}

pub const CFI_DEFAULT_C: f64 = 2000.0;

impl CfiInputs {
    pub fn new(f_amp: f64, layers: usize, rho_max: f64, d_model: usize) -> Self {
        Self {
            f_amp,
            layers,
            rho_max,
            d_model,
            c: CFI_DEFAULT_C,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.f_amp) {
            return Err(Error::invalid("f_amp must be in [0, 1]"));
        }
        if self.layers == 0 || self.d_model == 0 {
            return Err(Error::invalid("layers and d_model must be positive"));
        }
        if !(self.rho_max > 0.0) || !(self.c >= 0.0) {
            return Err(Error::invalid("rho_max must be > 0 and c >= 0"));
        }
        Ok(())
    }
}

/// CFI = f_amp * layers * max(0, ln rho_max) + C / d_model: an instability
/// term active only when the worst transition amplifies, plus a width
/// penalty for narrow models.
pub fn cfi(inputs: &CfiInputs) -> Result<f64> {
    inputs.validate()?;
    let instability =
        inputs.f_amp * inputs.layers as f64 * inputs.rho_max.ln().max(0.0);
    Ok(instability + inputs.c / inputs.d_model as f64)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::dims(
            "spearman",
            format!("{}", xs.len()),
            format!("{}", ys.len()),
        ));
    }
    if xs.len() < 2 {
        return Err(Error::DegenerateCorrelation("fewer than 2 points".into()));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    pearson(&rx, &ry)
}

/// Spearman correlation between a per-layer budget and per-layer mean
/// compression regret.
pub fn budget_regret_correlation(budget: &[f64], layer_regrets: &[f64]) -> Result<f64> {
    spearman(budget, layer_regrets)
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap().then(a.cmp(&b)));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Average 1-based rank over the tie run.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateCorrelation(
            "constant sequence has no rank ordering".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approx::CompressionConfig;
    use crate::model::{generate_tokens, synth_model, ModelConfig, TokenDataset};

    #[test]
    fn cfi_direct_values() {
        // Fully contracting model: only the width penalty remains.
        let small = CfiInputs::new(0.0, 12, 0.96, 768);
        let v = cfi(&small).unwrap();
        assert!((v - 2000.0 / 768.0).abs() < 1e-12);

        let qwen = CfiInputs::new(17.0 / 35.0, 36, 1.33, 4096);
        let vq = cfi(&qwen).unwrap();
        assert!((vq - 5.48).abs() < 0.01, "CFI {vq}");
    }

    #[test]
    fn cfi_limits_and_monotonicity() {
        // f_amp = 0 and growing width drive CFI to zero.
        let wide = CfiInputs {
            f_amp: 0.0,
            layers: 48,
            rho_max: 0.5,
            d_model: 1 << 30,
            c: CFI_DEFAULT_C,
        };
        assert!(cfi(&wide).unwrap() < 1e-5);

        let base = CfiInputs::new(0.4, 24, 1.2, 1024);
        let v0 = cfi(&base).unwrap();
        let mut more_amp = base;
        more_amp.f_amp = 0.6;
        assert!(cfi(&more_amp).unwrap() > v0);
        let mut deeper = base;
        deeper.layers = 30;
        assert!(cfi(&deeper).unwrap() > v0);
        let mut hotter = base;
        hotter.rho_max = 1.5;
        assert!(cfi(&hotter).unwrap() > v0);
        let mut wider = base;
        wider.d_model = 4096;
        assert!(cfi(&wider).unwrap() < v0);
        // Below rho_max = 1 the instability term stays clamped at zero.
        let mut contracting = base;
        contracting.rho_max = 0.8;
        let mut more_contracting = base;
        more_contracting.rho_max = 0.6;
        assert_eq!(
            cfi(&contracting).unwrap(),
            cfi(&more_contracting).unwrap()
        );
    }

    #[test]
    fn spearman_basics() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&xs, &[10.0, 20.0, 30.0, 40.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&xs, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(
            spearman(&xs, &[5.0, 5.0, 5.0, 5.0]),
            Err(Error::DegenerateCorrelation(_))
        ));
    }

    #[test]
    fn spearman_matches_naive_oracle() {
        // Oracle: brute-force ranks (average over ties), then Pearson.
        let xs: Vec<f64> = (0..12).map(|i| ((i * 29) % 7) as f64).collect();
        let ys: Vec<f64> = (0..12).map(|i| ((i * 13) % 5) as f64 * 0.5).collect();

        let naive_rank = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .map(|&x| {
                    let less = v.iter().filter(|&&o| o < x).count() as f64;
                    let equal = v.iter().filter(|&&o| o == x).count() as f64;
                    less + (equal + 1.0) / 2.0
                })
                .collect()
        };
        let rx = naive_rank(&xs);
        let ry = naive_rank(&ys);
        let expected = pearson(&rx, &ry).unwrap();
        let got = spearman(&xs, &ys).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn budget_correlation_identity() {
        let b = [0.4, 0.3, 0.2, 0.1];
        assert!((budget_regret_correlation(&b, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn greedy_zero_rounds_preserves_baseline() {
        let w = synth_model(&ModelConfig::tiny(), 1).unwrap();
        let ds = TokenDataset::new(generate_tokens(101, 48, 3), 48);
        let ctx = EvalContext::new(&w, &ds);
        let curve = greedy(&ctx, &CompressionConfig::new(0.2, 2, 0.0), 0, true).unwrap();
        assert!(curve.rounds.is_empty());
        assert_eq!(curve.baseline_ppl, ctx.baseline_ppl().unwrap());
    }

    #[test]
    fn greedy_commits_min_regret_each_round() {
        let w = synth_model(&ModelConfig::tiny(), 2).unwrap();
        let ds = TokenDataset::new(generate_tokens(101, 48, 7), 48);
        let ctx = EvalContext::new(&w, &ds);
        let cfg = CompressionConfig::new(0.15, 2, 0.0);
        let curve = greedy(&ctx, &cfg, 3, true).unwrap();
        assert_eq!(curve.rounds.len(), 3);
        assert_eq!(curve.ledger.violations, 0);
        // Savings are cumulative and non-decreasing.
        let fractions: Vec<f64> = curve.rounds.iter().map(|r| r.flops_saved_fraction).collect();
        assert!(fractions.windows(2).all(|w| w[0] <= w[1]));
        assert!(*fractions.last().unwrap() > 0.0);

        // Round 1's choice must match the singleton-regret argmin.
        let config = ctx.config();
        let mut best: Option<(f64, CompressionGroup)> = None;
        for g in config.groups() {
            let plan = [(g, clamped_living(config, g, &cfg))].into_iter().collect();
            let ppl = ctx.evaluate(&plan).unwrap().ppl;
            if best.map_or(true, |(b, _)| ppl < b) {
                best = Some((ppl, g));
            }
        }
        assert_eq!(curve.rounds[0].group, best.unwrap().1);
    }

    #[test]
    fn greedy_static_order_is_deterministic() {
        let w = synth_model(&ModelConfig::tiny(), 3).unwrap();
        let ds = TokenDataset::new(generate_tokens(101, 48, 9), 48);
        let ctx = EvalContext::new(&w, &ds);
        let cfg = CompressionConfig::new(0.25, 2, 0.0);
        let a = greedy(&ctx, &cfg, 4, false).unwrap();
        let b = greedy(&ctx, &cfg, 4, false).unwrap();
        let order_a: Vec<_> = a.rounds.iter().map(|r| r.group).collect();
        let order_b: Vec<_> = b.rounds.iter().map(|r| r.group).collect();
        assert_eq!(order_a, order_b);
    }
}
