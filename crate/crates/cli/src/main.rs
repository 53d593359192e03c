//! `vcrn` — train and run the concept-dictionary captioner from the shell.
//!
//! Subcommands cover the whole pipeline: synthesize a corpus, fit the
//! dictionary, train, caption, evaluate, verify gradients, and dump
//! attention diagnostics. Every command is deterministic given its seed.

mod commands;

use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "vcrn", version, about = "Video captioning with a visual-concept dictionary")]
struct Cli {
    /// Emit machine-readable line-delimited JSON instead of prose.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted latent concepts.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        videos: usize,
        #[arg(long, default_value_t = 4)]
        concepts: usize,
        /// Frames sampled per video.
        #[arg(long, default_value_t = 26)]
        frames: usize,
        /// Appearance feature width.
        #[arg(long = "dim-a", default_value_t = 32)]
        dim_a: usize,
        /// Motion feature width.
        #[arg(long = "dim-m", default_value_t = 32)]
        dim_m: usize,
        /// Frame noise around the concept prototypes.
        #[arg(long, default_value_t = 0.5)]
        noise: f64,
        /// Paraphrase captions per video.
        #[arg(long = "captions-per-video", default_value_t = 2)]
        captions_per_video: usize,
        /// Probability that a video carries two latent concepts.
        #[arg(long = "pair-prob", default_value_t = 0.3)]
        pair_prob: f64,
        #[arg(long)]
        out: PathBuf,
    },

    /// Pool all frame features and fit the k-means dictionary.
    BuildDict {
        #[arg(long)]
        corpus: PathBuf,
        /// Number of cluster centers.
        #[arg(long, default_value_t = 1000)]
        m: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        max_iter: usize,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// l2-normalize pooled rows before clustering.
        #[arg(long)]
        l2_normalize: bool,
        #[arg(long)]
        out: PathBuf,
    },

    /// Train the captioner and save the best checkpoint by held-out loss.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Fitted dictionary file; may be omitted when the config disables
        /// the dictionary branch.
        #[arg(long)]
        dict: Option<PathBuf>,
        /// key = value config file with [model]/[train] sections.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override [train] epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Override [model] num_blocks (encoder depth sweeps).
        #[arg(long)]
        blocks: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Training log (JSON per epoch); defaults to <out>.log.
        #[arg(long)]
        log: Option<PathBuf>,
    },

    /// Caption every video in a corpus with a trained checkpoint.
    Caption {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 5)]
        beam: usize,
        #[arg(long = "max-len", default_value_t = 26)]
        max_len: usize,
        /// Length-normalization exponent (0 = plain summed log-probs).
        #[arg(long = "length-norm", default_value_t = 0.0)]
        length_norm: f64,
        #[arg(long)]
        out: PathBuf,
    },

    /// Score generated captions against references (BLEU-4 and CIDEr).
    Eval {
        /// Caption JSONL produced by the caption command.
        #[arg(long)]
        hyp: PathBuf,
        /// Reference captions, tab-separated video_id and text.
        #[arg(long)]
        refs: PathBuf,
        #[arg(long = "max-len", default_value_t = 26)]
        max_len: usize,
    },

    /// Compare tape gradients against finite differences on a tiny model.
    Gradcheck {
        /// Optional config; defaults to the tiny verification model.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
    },

    /// Dump per-step attention weights and top concepts for one video.
    DumpAttention {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long = "video-id")]
        video_id: String,
        #[arg(long = "max-len", default_value_t = 26)]
        max_len: usize,
        #[arg(long = "top-k", default_value_t = 5)]
        top_k: usize,
        /// Write JSONL here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::GenData {
            seed,
            videos,
            concepts,
            frames,
            dim_a,
            dim_m,
            noise,
            captions_per_video,
            pair_prob,
            out,
        } => commands::gen_data(
            seed,
            videos,
            concepts,
            frames,
            dim_a,
            dim_m,
            noise,
            captions_per_video,
            pair_prob,
            &out,
            cli.json,
        ),
        Command::BuildDict { corpus, m, seed, max_iter, tol, l2_normalize, out } => {
            commands::build_dict(&corpus, m, seed, max_iter, tol, l2_normalize, &out, cli.json)
        }
        Command::Train { corpus, dict, config, seed, epochs, blocks, out, log } => commands::train(
            &corpus,
            dict.as_deref(),
            config.as_deref(),
            seed,
            epochs,
            blocks,
            &out,
            log.as_deref(),
            cli.json,
        ),
        Command::Caption { ckpt, corpus, beam, max_len, length_norm, out } => {
            commands::caption(&ckpt, &corpus, beam, max_len, length_norm, &out, cli.json)
        }
        Command::Eval { hyp, refs, max_len } => commands::eval(&hyp, &refs, max_len, cli.json),
        Command::Gradcheck { config, seed, tolerance } => {
            commands::gradcheck(config.as_deref(), seed, tolerance, cli.json)
        }
        Command::DumpAttention { ckpt, corpus, video_id, max_len, top_k, out } => {
            commands::dump_attention(&ckpt, &corpus, &video_id, max_len, top_k, out.as_deref())
        }
    };

    match outcome {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(err.exit_code());
        }
    }
}
