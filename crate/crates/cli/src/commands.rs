//! Subcommand implementations.

use crate::inputs::{preset_config, resolve_model, resolve_tokens, FileDefaults};
use crate::report::{sibling_with_extension, Report};
use crate::{AblationKind, Command, CommonArgs};
use anyhow::{bail, Context, Result};
use compressense::allocation::{cfi, greedy, CfiInputs, CFI_DEFAULT_C};
use compressense::approx::{BoundLedger, CompressionConfig, LedgerTotals};
use compressense::groups::ComponentType;
use compressense::lyapunov;
use compressense::model::{
    build_approx_model, perplexity, save_weights, synth_model, CompressionPlan,
};
use compressense::sensitivity::{
    catastrophe_threshold, clamped_living, heatmap, run_ablation, verify_bounds, AblationPlan,
    EvalContext,
};
use serde_json::{json, Value};
use std::path::PathBuf;

pub fn run(command: Command) -> Result<u64> {
    match command {
        Command::VerifyBounds { common, trials } => cmd_verify_bounds(common, trials),
        Command::Ppl {
            common,
            sparsity,
            rank,
            delta,
        } => cmd_ppl(common, sparsity, rank, delta),
        Command::Ablate {
            common,
            kind,
            layers,
            layer,
            levels,
            sparsity,
            rank,
            delta,
        } => cmd_ablate(common, kind, layers, layer, levels, sparsity, rank, delta),
        Command::Heatmap {
            common,
            sparsity,
            rank,
            delta,
        } => cmd_heatmap(common, sparsity, rank, delta),
        Command::Lyapunov { common, epsilon } => cmd_lyapunov(common, epsilon),
        Command::Greedy {
            common,
            sparsity,
            rank,
            delta,
            rounds,
            reevaluate,
        } => cmd_greedy(common, sparsity, rank, delta, rounds, reevaluate),
        Command::Threshold {
            common,
            layer,
            grid,
            regret_cap,
        } => cmd_threshold(common, layer, grid, regret_cap),
        Command::Cfi {
            common,
            f_amp,
            layers,
            rho_max,
            d_model,
            c,
        } => cmd_cfi(common, f_amp, layers, rho_max, d_model, c),
        Command::Synth { common, preset } => cmd_synth(common, preset),
    }
}

struct Session {
    defaults: FileDefaults,
    seed: u64,
    model_seed: u64,
    out: PathBuf,
    model: crate::inputs::ResolvedModel,
}

impl Session {
    /// Resolves shared arguments, the worker pool, and the model.
    fn open(common: &CommonArgs, default_out: &str) -> Result<Self> {
        let defaults = FileDefaults::load(common.config.as_ref())?;
        if let Some(jobs) = defaults.usize_opt("jobs", common.jobs) {
            // A later duplicate initialization (tests, multiple sessions) is
            // harmless; the first pool wins.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build_global();
        }
        let seed = defaults.u64("seed", common.seed, 1);
        let model_seed = defaults.u64("model_seed", common.model_seed, 1);
        let out = defaults
            .path_opt("out", common.out.clone())
            .unwrap_or_else(|| PathBuf::from(default_out));
        let model_path = defaults.path_opt("model", common.model.clone());
        let synth = defaults.string_opt("synth", common.synth.clone());
        let model = resolve_model(model_path.as_ref(), synth.as_deref(), model_seed)?;
        Ok(Self {
            defaults,
            seed,
            model_seed,
            out,
            model,
        })
    }

    fn tokens(&self, common: &CommonArgs, default_count: usize) -> Result<crate::inputs::ResolvedTokens> {
        let path = self.defaults.path_opt("tokens", common.tokens.clone());
        let gen_count = self
            .defaults
            .usize("gen_tokens", common.gen_tokens, default_count);
        let chunk_len = self.defaults.usize_opt("chunk_len", common.chunk_len);
        resolve_tokens(
            path.as_deref(),
            gen_count,
            chunk_len,
            self.seed,
            self.model.weights.config.vocab_size,
        )
    }

    fn context<'a>(
        &'a self,
        dataset: &'a compressense::model::TokenDataset,
    ) -> EvalContext<'a> {
        let ctx = EvalContext::new(&self.model.weights, dataset);
        match std::env::var_os("COMPRESSENSE_CACHE_DIR") {
            Some(dir) if !dir.is_empty() => ctx.with_disk_cache(PathBuf::from(dir)),
            _ => ctx,
        }
    }

    fn living_cfg(
        &self,
        sparsity: Option<f64>,
        rank: Option<usize>,
        delta: Option<f64>,
        default_keep: f64,
        default_rank: usize,
    ) -> CompressionConfig {
        CompressionConfig::new(
            self.defaults.f64("sparsity", sparsity, default_keep),
            self.defaults.usize("rank", rank, default_rank),
            self.defaults.f64("delta", delta, 0.0),
        )
    }

    fn finish(
        &self,
        command: &str,
        config: Value,
        tokens: Option<&Value>,
        results: Value,
        violations: u64,
    ) -> Result<u64> {
        let inputs = json!({
            "model": self.model.provenance,
            "tokens": tokens,
        });
        Report::new(command, config, inputs, results)
            .write(&self.out)
            .with_context(|| format!("writing report to {}", self.out.display()))?;
        println!("report: {}", self.out.display());
        Ok(violations)
    }
}

fn ledger_json(totals: &LedgerTotals) -> Value {
    json!({
        "calls": totals.calls,
        "violations": totals.violations,
        "max_ratio": totals.max_ratio,
    })
}

fn cfg_json(cfg: &CompressionConfig) -> Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn cmd_verify_bounds(common: CommonArgs, trials: Option<usize>) -> Result<u64> {
    let session = Session::open(&common, "verify-bounds-report.json")?;
    let trials = session.defaults.usize("trials", trials, 1000);
    let tokens = session.tokens(&common, 256)?;
    let outcome = verify_bounds(&session.weights(), &tokens.dataset, trials, session.seed)?;
    let violations = outcome.ledger.violations;
    session.finish(
        "verify-bounds",
        json!({ "trials": trials, "seed": session.seed, "model_seed": session.model_seed }),
        Some(&tokens.provenance),
        json!({
            "trials": outcome.trials,
            "ledger": ledger_json(&outcome.ledger),
        }),
        violations,
    )
}

impl Session {
    fn weights(&self) -> &compressense::model::ModelWeights {
        &self.model.weights
    }
}

fn cmd_ppl(
    common: CommonArgs,
    sparsity: Option<f64>,
    rank: Option<usize>,
    delta: Option<f64>,
) -> Result<u64> {
    let session = Session::open(&common, "ppl-report.json")?;
    let tokens = session.tokens(&common, 2048)?;
    let wrap = sparsity.is_some() || rank.is_some() || delta.is_some();
    let (ppl, ledger, cfg_value) = if wrap {
        let cfg = session.living_cfg(sparsity, rank, delta, 0.05, 16);
        let config = &session.weights().config;
        let plan: CompressionPlan = config
            .groups()
            .into_iter()
            .map(|g| (g, clamped_living(config, g, &cfg)))
            .collect();
        let ctx = session.context(&tokens.dataset);
        let mut approx =
            build_approx_model(session.weights(), &plan, ctx.memo(), None)?;
        let mut ledger = BoundLedger::totals_only();
        let ppl = perplexity(
            session.weights(),
            &tokens.dataset,
            Some(&mut approx),
            Some(&mut ledger),
        )?;
        (ppl, ledger.totals(), Some(cfg_json(&cfg)))
    } else {
        let ppl = perplexity(session.weights(), &tokens.dataset, None, None)?;
        (ppl, LedgerTotals::default(), None)
    };
    println!("{ppl}");
    let violations = ledger.violations;
    session.finish(
        "ppl",
        json!({ "seed": session.seed, "model_seed": session.model_seed, "wrap": cfg_value }),
        Some(&tokens.provenance),
        json!({ "ppl": ppl, "ledger": ledger_json(&ledger) }),
        violations,
    )
}

fn parse_csv_usize(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|part| part.trim().parse::<usize>().map_err(Into::into))
        .collect()
}

fn parse_csv_f64(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|part| part.trim().parse::<f64>().map_err(Into::into))
        .collect()
}

fn parse_levels(s: &str) -> Result<Vec<CompressionConfig>> {
    s.split(',')
        .map(|part| {
            let (keep, rank) = part
                .trim()
                .split_once(':')
                .with_context(|| format!("level '{part}' is not keep:rank"))?;
            Ok(CompressionConfig::new(keep.parse()?, rank.parse()?, 0.0))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn cmd_ablate(
    common: CommonArgs,
    kind: AblationKind,
    layers: Option<String>,
    layer: Option<usize>,
    levels: Option<String>,
    sparsity: Option<f64>,
    rank: Option<usize>,
    delta: Option<f64>,
) -> Result<u64> {
    let session = Session::open(&common, "ablate-report.json")?;
    let tokens = session.tokens(&common, 2048)?;
    let cfg = session.living_cfg(sparsity, rank, delta, 0.05, 16);
    let n_layers = session.weights().config.n_layers;

    let (kind_name, plan) = match kind {
        AblationKind::SingleLayer => {
            let layers = match session.defaults.string_opt("layers", layers) {
                Some(csv) => parse_csv_usize(&csv)?,
                None => (0..n_layers).collect(),
            };
            ("single_layer", AblationPlan::SingleLayer { layers, cfg })
        }
        AblationKind::Component => (
            "component_type",
            AblationPlan::ComponentType {
                components: ComponentType::ALL.to_vec(),
                cfg,
            },
        ),
        AblationKind::CumulativeForward => {
            ("cumulative_forward", AblationPlan::CumulativeForward { cfg })
        }
        AblationKind::CumulativeBackward => (
            "cumulative_backward",
            AblationPlan::CumulativeBackward { cfg },
        ),
        AblationKind::Sweep => {
            let layer = session.defaults.usize("layer", layer, 0);
            let levels_str = session
                .defaults
                .string_opt("levels", levels)
                .unwrap_or_else(|| "0.5:256,0.2:128,0.1:64,0.05:32,0.01:4".into());
            (
                "level_sweep",
                AblationPlan::LevelSweep {
                    layer,
                    levels: parse_levels(&levels_str)?,
                },
            )
        }
    };

    let ctx = session.context(&tokens.dataset);
    let records = run_ablation(&ctx, &plan)?;
    let mut totals = LedgerTotals::default();
    for r in &records {
        totals.merge(&r.ledger);
    }
    let violations = totals.violations;
    session.finish(
        "ablate",
        json!({
            "kind": kind_name,
            "compression": cfg_json(&cfg),
            "seed": session.seed,
            "model_seed": session.model_seed,
        }),
        Some(&tokens.provenance),
        json!({
            "baseline_ppl": ctx.baseline_ppl()?,
            "records": records,
            "ledger": ledger_json(&totals),
        }),
        violations,
    )
}

fn cmd_heatmap(
    common: CommonArgs,
    sparsity: Option<f64>,
    rank: Option<usize>,
    delta: Option<f64>,
) -> Result<u64> {
    let session = Session::open(&common, "heatmap-report.json")?;
    let tokens = session.tokens(&common, 2048)?;
    let cfg = session.living_cfg(sparsity, rank, delta, 0.05, 32);
    let ctx = session.context(&tokens.dataset);
    let hm = heatmap(&ctx, &cfg)?;

    let csv_path = sibling_with_extension(&session.out, "csv");
    std::fs::write(&csv_path, hm.to_csv())
        .with_context(|| format!("writing {}", csv_path.display()))?;
    println!("csv: {}", csv_path.display());

    let violations = hm.ledger.violations;
    let results = serde_json::to_value(&hm)?;
    session.finish(
        "heatmap",
        json!({
            "compression": cfg_json(&cfg),
            "seed": session.seed,
            "model_seed": session.model_seed,
        }),
        Some(&tokens.provenance),
        results,
        violations,
    )
}

fn cmd_lyapunov(common: CommonArgs, epsilon: Option<String>) -> Result<u64> {
    let session = Session::open(&common, "lyapunov-report.json")?;
    let tokens = session.tokens(&common, 512)?;
    let eps_str = session
        .defaults
        .string("epsilon", epsilon, "0.01");
    let epsilons = parse_csv_f64(&eps_str)?;
    if tokens.dataset.is_empty() {
        bail!("lyapunov requires a non-empty token stream");
    }
    let chunk: Vec<u32> = tokens
        .dataset
        .ids
        .iter()
        .take(tokens.dataset.chunk_len)
        .copied()
        .collect();

    let mut traces = Vec::new();
    for &eps in &epsilons {
        let trace = lyapunov::trace(session.weights(), &chunk, eps, session.seed)?;
        let budget = lyapunov::budget(&trace).ok();
        let (contracting, total) = trace.contracting();
        let stations = &trace.stations;
        traces.push(json!({
            "epsilon": eps,
            "seed": trace.seed,
            "embedding": {
                "h_norm": stations[0].h_norm,
                "e_norm": stations[0].e_norm,
                "v0": stations[0].v,
            },
            "h_norm": stations[1..].iter().map(|s| s.h_norm).collect::<Vec<_>>(),
            "e_norm": stations[1..].iter().map(|s| s.e_norm).collect::<Vec<_>>(),
            "v": stations[1..].iter().map(|s| s.v).collect::<Vec<_>>(),
            "rho": trace.transitions.iter().map(|t| t.rho).collect::<Vec<_>>(),
            "alpha2": trace.transitions.iter().map(|t| t.alpha2).collect::<Vec<_>>(),
            "beta2": trace.transitions.iter().map(|t| t.beta2).collect::<Vec<_>>(),
            "rho_max": trace.rho_max(),
            "contracting": contracting,
            "interlayer_total": total,
            "f_amp": trace.f_amp(),
            "budget": budget,
        }));
    }
    session.finish(
        "lyapunov",
        json!({
            "epsilon": epsilons,
            "seed": session.seed,
            "model_seed": session.model_seed,
            "tokens_used": chunk.len(),
        }),
        Some(&tokens.provenance),
        json!({ "traces": traces }),
        0,
    )
}

fn cmd_greedy(
    common: CommonArgs,
    sparsity: Option<f64>,
    rank: Option<usize>,
    delta: Option<f64>,
    rounds: Option<usize>,
    reevaluate: Option<bool>,
) -> Result<u64> {
    let session = Session::open(&common, "greedy-report.json")?;
    let tokens = session.tokens(&common, 2048)?;
    let cfg = session.living_cfg(sparsity, rank, delta, 0.05, 32);
    let group_count = session.weights().config.n_layers * 6;
    let rounds = session.defaults.usize("rounds", rounds, group_count);
    let reevaluate = session.defaults.bool("reevaluate", reevaluate, true);

    let ctx = session.context(&tokens.dataset);
    let curve = greedy(&ctx, &cfg, rounds, reevaluate)?;

    let mut csv = String::from("round,group,ppl,regret_added,flops_saved_fraction\n");
    for r in &curve.rounds {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.round, r.label, r.ppl, r.regret_added, r.flops_saved_fraction
        ));
    }
    let csv_path = sibling_with_extension(&session.out, "csv");
    std::fs::write(&csv_path, csv)
        .with_context(|| format!("writing {}", csv_path.display()))?;
    println!("csv: {}", csv_path.display());

    let violations = curve.ledger.violations;
    let results = serde_json::to_value(&curve)?;
    session.finish(
        "greedy",
        json!({
            "compression": cfg_json(&cfg),
            "rounds": rounds,
            "reevaluate": reevaluate,
            "seed": session.seed,
            "model_seed": session.model_seed,
        }),
        Some(&tokens.provenance),
        results,
        violations,
    )
}

fn cmd_threshold(
    common: CommonArgs,
    layer: Option<usize>,
    grid: Option<String>,
    regret_cap: Option<f64>,
) -> Result<u64> {
    let session = Session::open(&common, "threshold-report.json")?;
    let tokens = session.tokens(&common, 2048)?;
    let layer = session.defaults.usize("layer", layer, 0);
    let regret_cap = session.defaults.f64("regret_cap", regret_cap, 100.0);
    let grid_str = session
        .defaults
        .string("grid", grid, "0.5,0.7,0.8,0.9,0.95,0.99");
    let grid = parse_csv_f64(&grid_str)?;

    let ctx = session.context(&tokens.dataset);
    let scan = catastrophe_threshold(&ctx, layer, &grid, regret_cap)?;
    match scan.tau {
        Some(tau) => println!("tau = {tau}"),
        None => println!("tau below grid minimum"),
    }
    let violations = scan.ledger.violations;
    let results = serde_json::to_value(&scan)?;
    session.finish(
        "threshold",
        json!({
            "layer": layer,
            "grid": grid,
            "regret_cap": regret_cap,
            "seed": session.seed,
            "model_seed": session.model_seed,
        }),
        Some(&tokens.provenance),
        results,
        violations,
    )
}

fn cmd_cfi(
    common: CommonArgs,
    f_amp: Option<f64>,
    layers: Option<usize>,
    rho_max: Option<f64>,
    d_model: Option<usize>,
    c: Option<f64>,
) -> Result<u64> {
    let defaults = FileDefaults::load(common.config.as_ref())?;
    let inputs = CfiInputs {
        f_amp: defaults.f64("f_amp", f_amp, f64::NAN),
        layers: defaults
            .usize_opt("layers", layers)
            .context("--layers is required")?,
        rho_max: defaults.f64("rho_max", rho_max, f64::NAN),
        d_model: defaults
            .usize_opt("d_model", d_model)
            .context("--d-model is required")?,
        c: defaults.f64("c", c, CFI_DEFAULT_C),
    };
    if inputs.f_amp.is_nan() {
        bail!("--f-amp is required");
    }
    if inputs.rho_max.is_nan() {
        bail!("--rho-max is required");
    }
    let value = cfi(&inputs)?;
    println!("{value}");

    let out = defaults
        .path_opt("out", common.out.clone())
        .unwrap_or_else(|| PathBuf::from("cfi-report.json"));
    Report::new(
        "cfi",
        serde_json::to_value(&inputs)?,
        json!({ "model": null, "tokens": null }),
        json!({ "cfi": value }),
    )
    .write(&out)
    .with_context(|| format!("writing report to {}", out.display()))?;
    Ok(0)
}

fn cmd_synth(common: CommonArgs, preset: Option<String>) -> Result<u64> {
    let defaults = FileDefaults::load(common.config.as_ref())?;
    let preset = defaults.string("preset", preset, "tiny");
    let model_seed = defaults.u64("model_seed", common.model_seed, 1);
    let out = defaults
        .path_opt("out", common.out.clone())
        .unwrap_or_else(|| PathBuf::from(format!("synth-{preset}.tensors")));

    let config = preset_config(&preset)?;
    let weights = synth_model(&config, model_seed)?;
    save_weights(&out, &weights).with_context(|| format!("writing {}", out.display()))?;
    println!("model: {}", out.display());

    let report_path = out.with_extension("report.json");
    Report::new(
        "synth",
        json!({ "preset": preset, "model_seed": model_seed }),
        json!({ "model": null, "tokens": null }),
        json!({
            "path": out.display().to_string(),
            "checksum": format!("{:016x}", weights.checksum()),
            "config": config,
            "weight_matrices": config.total_weight_matrices(),
        }),
    )
    .write(&report_path)
    .with_context(|| format!("writing report to {}", report_path.display()))?;
    println!("report: {}", report_path.display());
    Ok(0)
}
