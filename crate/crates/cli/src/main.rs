//! Command-line entry point for the compression experiment harness.
//!
//! Every subcommand writes a deterministic JSON report (same seeds, same
//! bytes) and exits 0 on success, 1 if any error-bound violation was
//! recorded anywhere in the run, and 2 on usage errors.

mod commands;
mod inputs;
mod report;

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "compressense",
    version,
    about = "Weight-matrix compression with verified error bounds: \
             sensitivity, stability and allocation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Weight container (binary named-tensor format).
    #[arg(long)]
    model: Option<PathBuf>,

    /// Synthetic model preset (tiny, tiny-deep, gpt2-small) instead of --model.
    #[arg(long)]
    synth: Option<String>,

    /// Seed for synthetic model initialization.
    #[arg(long)]
    model_seed: Option<u64>,

    /// Token-id file: raw little-endian u32, or a JSON array for *.json.
    #[arg(long)]
    tokens: Option<PathBuf>,

    /// Number of tokens to generate when --tokens is absent.
    #[arg(long)]
    gen_tokens: Option<usize>,

    /// Evaluation chunk length.
    #[arg(long)]
    chunk_len: Option<usize>,

    /// Seed for every stochastic step of the run.
    #[arg(long)]
    seed: Option<u64>,

    /// Worker pool size; defaults to available parallelism.
    #[arg(long)]
    jobs: Option<usize>,

    /// Report output path.
    #[arg(long)]
    out: Option<PathBuf>,

    /// JSON config file with defaults; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationKind {
    SingleLayer,
    Component,
    CumulativeForward,
    CumulativeBackward,
    Sweep,
}

#[derive(Subcommand)]
enum Command {
    /// Randomized zero-violation suite: random (group, k, r, delta) configs
    /// with full bound tracking.
    VerifyBounds {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of random configurations.
        #[arg(long)]
        trials: Option<usize>,
    },

    /// Perplexity of the model, optionally with every group compressed.
    Ppl {
        #[command(flatten)]
        common: CommonArgs,
        /// Retained weight fraction k in (0, 1] for all-group wrapping.
        #[arg(long)]
        sparsity: Option<f64>,
        /// SVD rank (clamped per group shape).
        #[arg(long)]
        rank: Option<usize>,
        /// Cache distance threshold.
        #[arg(long)]
        delta: Option<f64>,
    },

    /// Ablation sweeps: single-layer, component-type, cumulative, or a
    /// per-layer compression-level sweep.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        kind: AblationKind,
        /// Layer subset for single-layer runs, e.g. "0,1,11".
        #[arg(long)]
        layers: Option<String>,
        /// Target layer for sweep runs.
        #[arg(long)]
        layer: Option<usize>,
        /// Sweep levels as "keep:rank" pairs, e.g. "0.5:256,0.05:32".
        #[arg(long)]
        levels: Option<String>,
        #[arg(long)]
        sparsity: Option<f64>,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        delta: Option<f64>,
    },

    /// Per-group regret matrix (layers x components), JSON plus CSV.
    Heatmap {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        sparsity: Option<f64>,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        delta: Option<f64>,
    },

    /// Perturbation trace: V(t), contraction factors, budget.
    Lyapunov {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated perturbation magnitudes.
        #[arg(long)]
        epsilon: Option<String>,
    },

    /// Greedy sequential compression curve, JSON plus CSV.
    Greedy {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        sparsity: Option<f64>,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        delta: Option<f64>,
        /// Committed rounds (default: every group).
        #[arg(long)]
        rounds: Option<usize>,
        /// Re-evaluate candidates on top of the committed set each round.
        #[arg(long)]
        reevaluate: Option<bool>,
    },

    /// Catastrophe threshold: Wanda sparsity sweep on one layer.
    Threshold {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        layer: Option<usize>,
        /// Ascending sparsity grid, e.g. "0.5,0.7,0.8,0.9,0.95,0.99".
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        regret_cap: Option<f64>,
    },

    /// Compression fragility index from measured stability inputs.
    Cfi {
        #[command(flatten)]
        common: CommonArgs,
        /// Fraction of amplifying inter-layer transitions.
        #[arg(long)]
        f_amp: Option<f64>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        rho_max: Option<f64>,
        #[arg(long)]
        d_model: Option<usize>,
        /// Width-penalty constant.
        #[arg(long)]
        c: Option<f64>,
    },

    /// Write a synthetic model container.
    Synth {
        #[command(flatten)]
        common: CommonArgs,
        /// Synthetic preset to write (tiny, tiny-deep, gpt2-small).
        #[arg(long)]
        preset: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(violations) => {
            eprintln!("error-bound violations recorded: {violations}");
            ExitCode::from(1)
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

