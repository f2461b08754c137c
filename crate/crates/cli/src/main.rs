//! Command-line driver for the adaptation engine.
//!
//! Every command exits 0 on success and prints a single-line diagnostic to
//! stderr on failure. Summary lines are `key=value` pairs for scripting.

mod commands;

use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "sgem",
    version,
    about = "Single-utterance test-time adaptation toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus (features + manifest).
    MakeCorpus {
        /// Output directory; receives manifest.jsonl and features/.
        #[arg(long)]
        out: PathBuf,
        /// Number of utterances.
        #[arg(long)]
        n: usize,
        /// Generation seed (falls back to SGEM_SEED, then 0).
        #[arg(long)]
        seed: Option<u64>,
        /// Shift to inject: none, gauss, or texture:K (K in 0..8).
        #[arg(long, default_value = "none")]
        shift: String,
        /// Signal-to-noise ratio of the injected shift, in dB.
        #[arg(long, default_value_t = 10.0)]
        snr_db: f64,
        /// Minimum utterance length in tokens.
        #[arg(long, default_value_t = 8)]
        min_tokens: usize,
        /// Maximum utterance length in tokens.
        #[arg(long, default_value_t = 40)]
        max_tokens: usize,
    },
    /// Pre-train a reference model on a labeled corpus.
    TrainSource {
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Model kind: ctc (frame-synchronous) or ar (autoregressive).
        #[arg(long, default_value = "ctc")]
        mode: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 2e-3)]
        learning_rate: f64,
    },
    /// Fit the character n-gram language model on manifest transcripts.
    FitLm {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        order: usize,
        #[arg(long, default_value_t = 0.1)]
        smoothing_k: f64,
    },
    /// Adapt to every utterance of a manifest and write per-utterance results.
    Adapt {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        lm: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Adaptation config file (key = value); built-in defaults if absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Results file (JSON lines).
        #[arg(long)]
        out: PathBuf,
        /// Inference decoder for before/after transcripts (greedy|beam);
        /// overrides the config file.
        #[arg(long)]
        decode: Option<String>,
        /// Parallel adaptation workers.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Overrides the config-file seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a frozen model (no adaptation), optionally per length bucket.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        decode: Option<String>,
        /// Language model for beam decoding.
        #[arg(long)]
        lm: Option<PathBuf>,
        /// Comma-separated frame-count bucket edges, e.g. 40,80,120.
        #[arg(long)]
        buckets: Option<String>,
        /// Directory for per-utterance beam trace dumps (beam decode only).
        #[arg(long)]
        beam_trace: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the six-row toggle ablation grid.
    Ablate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        lm: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Dump per-utterance frame logits under a trained model.
    DumpLogits {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only the first N utterances.
        #[arg(long)]
        limit: Option<usize>,
    },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MakeCorpus {
            out,
            n,
            seed,
            shift,
            snr_db,
            min_tokens,
            max_tokens,
        } => commands::make_corpus(&out, n, seed, &shift, snr_db, min_tokens, max_tokens),
        Command::TrainSource {
            manifest,
            out,
            mode,
            seed,
            epochs,
            batch_size,
            learning_rate,
        } => commands::train_source(
            &manifest,
            &out,
            &mode,
            seed,
            epochs,
            batch_size,
            learning_rate,
        ),
        Command::FitLm {
            manifest,
            out,
            order,
            smoothing_k,
        } => commands::fit_lm(&manifest, &out, order, smoothing_k),
        Command::Adapt {
            model,
            lm,
            manifest,
            config,
            out,
            decode,
            jobs,
            seed,
        } => commands::adapt(
            &model,
            &lm,
            &manifest,
            config.as_deref(),
            &out,
            decode.as_deref(),
            jobs,
            seed,
        ),
        Command::Evaluate {
            model,
            manifest,
            decode,
            lm,
            buckets,
            beam_trace,
            config,
        } => commands::evaluate(
            &model,
            &manifest,
            decode.as_deref(),
            lm.as_deref(),
            buckets.as_deref(),
            beam_trace.as_deref(),
            config.as_deref(),
        ),
        Command::Ablate {
            model,
            lm,
            manifest,
            config,
        } => commands::ablate(&model, &lm, &manifest, config.as_deref()),
        Command::DumpLogits {
            model,
            manifest,
            out,
            limit,
        } => commands::dump_logits(&model, &manifest, &out, limit),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
