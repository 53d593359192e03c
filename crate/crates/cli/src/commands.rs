//! Implementations behind the CLI subcommands.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use vcrn_core::checkpoint::{load_checkpoint, save_checkpoint};
use vcrn_core::config::{DecodeConfig, KvConfig, ModelConfig, TrainConfig};
use vcrn_core::corpus::files::{load_captions, load_corpus, save_corpus};
use vcrn_core::corpus::synth::{generate, SynthConfig};
use vcrn_core::corpus::tokenize_caption;
use vcrn_core::decoder::FusionStrategy;
use vcrn_core::dictionary::{kmeans_fit, load_dictionary, pool_frames, save_dictionary, KmeansOptions, Seeding};
use vcrn_core::inference::{beam_search, dump_attention as dump_records, ModelScorer};
use vcrn_core::metrics::evaluate;
use vcrn_core::training::gradcheck::gradcheck as run_gradcheck;
use vcrn_core::training::train as run_train;
use vcrn_core::{Error, Result};

/// Success exit code carried back to `main`.
type Exit = Result<i32>;

#[allow(clippy::too_many_arguments)]
pub fn gen_data(
    seed: u64,
    videos: usize,
    concepts: usize,
    frames: usize,
    dim_a: usize,
    dim_m: usize,
    noise: f64,
    captions_per_video: usize,
    pair_probability: f64,
    out: &Path,
    json: bool,
) -> Exit {
    let cfg = SynthConfig {
        seed,
        num_videos: videos,
        num_concepts: concepts,
        frames_per_video: frames,
        d_appearance: dim_a,
        d_motion: dim_m,
        noise_sigma: noise,
        captions_per_video,
        pair_probability,
    };
    let synth = generate(&cfg)?;
    save_corpus(&synth.corpus, out)
        .map_err(|e| Error::Io(std::io::Error::other(format!("writing {}: {e}", out.display()))))?;
    if json {
        println!(
            "{}",
            serde_json::json!({
                "videos": synth.corpus.videos.len(),
                "captions": synth.corpus.captions.len(),
                "concepts": concepts,
                "frames_per_video": frames,
                "feature_dim": dim_a + dim_m,
                "out": out.display().to_string(),
            })
        );
    } else {
        println!(
            "wrote {} videos ({} captions, {} frames each, dim {}) to {}",
            synth.corpus.videos.len(),
            synth.corpus.captions.len(),
            frames,
            dim_a + dim_m,
            out.display()
        );
    }
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
pub fn build_dict(
    corpus_dir: &Path,
    m: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
    l2_normalize: bool,
    out: &Path,
    json: bool,
) -> Exit {
    let corpus = load_corpus(corpus_dir)?;
    let pool = pool_frames(&corpus.videos)?;
    let opts = KmeansOptions { max_iter, tol, seed, seeding: Seeding::PlusPlus, l2_normalize };
    let dict = kmeans_fit(&pool, m, &opts)?;
    save_dictionary(&dict, out)?;
    if json {
        println!(
            "{}",
            serde_json::json!({
                "centers": dict.num_centers(),
                "dim": dict.dim(),
                "iterations": dict.meta.iterations,
                "objective": dict.meta.objective,
                "out": out.display().to_string(),
            })
        );
    } else {
        println!(
            "fitted {} centers (dim {}) in {} iterations, objective {:.6}",
            dict.num_centers(),
            dict.dim(),
            dict.meta.iterations,
            dict.meta.objective
        );
    }
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
pub fn train(
    corpus_dir: &Path,
    dict_path: Option<&Path>,
    config_path: Option<&Path>,
    seed_override: Option<u64>,
    epochs_override: Option<usize>,
    blocks_override: Option<usize>,
    out: &Path,
    log_path: Option<&Path>,
    json: bool,
) -> Exit {
    let kv = match config_path {
        Some(path) => KvConfig::parse(&fs::read_to_string(path)?)?,
        None => KvConfig::new(),
    };
    let mut model_cfg = ModelConfig::from_kv(&kv)?;
    let mut train_cfg = TrainConfig::from_kv(&kv)?;
    if let Some(seed) = seed_override {
        train_cfg.seed = seed;
    }
    if let Some(epochs) = epochs_override {
        train_cfg.epochs = epochs;
    }
    if let Some(blocks) = blocks_override {
        model_cfg.num_blocks = blocks;
    }

    let corpus = load_corpus(corpus_dir)?;
    let dictionary = match (model_cfg.use_dictionary, dict_path) {
        (true, Some(path)) => Some(load_dictionary(path)?),
        (true, None) => {
            return Err(Error::Config(
                "config enables the dictionary but no --dict file was given".into(),
            ))
        }
        (false, _) => None,
    };

    let outcome = run_train(&corpus, dictionary, model_cfg, &train_cfg)?;
    save_checkpoint(&outcome.model, out)?;

    let log_file = log_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.with_extension("ckpt.log"));
    let mut w = std::io::BufWriter::new(fs::File::create(&log_file)?);
    for entry in &outcome.log {
        let line = serde_json::to_string(entry)
            .map_err(|e| Error::Parse(format!("serializing log: {e}")))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;

    for entry in &outcome.log {
        if json {
            println!(
                "{}",
                serde_json::to_string(entry).map_err(|e| Error::Parse(e.to_string()))?
            );
        } else {
            println!(
                "epoch {:>3}: train_loss {:.4}  val_loss {:.4}  val_acc {:.4}  ({:.1}s)",
                entry.epoch, entry.train_loss, entry.val_loss, entry.val_token_acc, entry.wall_time_s
            );
        }
    }
    if !json {
        println!(
            "saved best checkpoint (epoch {}) to {} ; log at {}",
            outcome.best_epoch,
            out.display(),
            log_file.display()
        );
    }
    Ok(0)
}

pub fn caption(
    ckpt: &Path,
    corpus_dir: &Path,
    beam: usize,
    max_len: usize,
    length_norm: f64,
    out: &Path,
    json: bool,
) -> Exit {
    let model = load_checkpoint(ckpt)?;
    let corpus = load_corpus(corpus_dir)?;
    let decode = DecodeConfig { beam_size: beam, max_len, length_norm };

    let mut w = std::io::BufWriter::new(fs::File::create(out)?);
    for video in &corpus.videos {
        let scorer = ModelScorer::new(&model, video)?;
        let ranked = beam_search(&scorer, decode.beam_size, decode.max_len, decode.length_norm)?;
        let best = &ranked[0];
        let text = model.vocab.decode_to_text(&best.tokens);
        let line = serde_json::json!({
            "video_id": video.id,
            "caption": text,
            "score": best.score,
            "length": best.tokens.len(),
        });
        writeln!(w, "{line}")?;
        if json {
            println!("{line}");
        }
    }
    w.flush()?;
    if !json {
        println!("captioned {} videos (beam {}) into {}", corpus.videos.len(), beam, out.display());
    }
    Ok(0)
}

pub fn eval(hyp_path: &Path, refs_path: &Path, max_len: usize, json: bool) -> Exit {
    let strip = |tokens: Vec<String>| -> Vec<String> {
        tokens
            .into_iter()
            .filter(|t| t != "<bos>" && t != "<eos>")
            .collect()
    };

    let mut hypotheses = Vec::new();
    let mut hyp_ids = Vec::new();
    for (lineno, line) in fs::read_to_string(hyp_path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| {
            Error::Parse(format!("{}:{}: bad JSON: {e}", hyp_path.display(), lineno + 1))
        })?;
        let id = value
            .get("video_id")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Parse(format!("{}:{}: missing video_id", hyp_path.display(), lineno + 1)))?;
        let text = value
            .get("caption")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Parse(format!("{}:{}: missing caption", hyp_path.display(), lineno + 1)))?;
        hyp_ids.push(id.to_string());
        hypotheses.push(strip(tokenize_caption(text, max_len)));
    }

    let mut by_video: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
    for (id, text) in load_captions(refs_path)? {
        by_video
            .entry(id)
            .or_default()
            .push(strip(tokenize_caption(&text, max_len)));
    }
    let mut reference_sets = Vec::with_capacity(hyp_ids.len());
    for id in &hyp_ids {
        let refs = by_video
            .get(id)
            .ok_or_else(|| Error::Contract(format!("no references for video '{id}'")))?;
        reference_sets.push(refs.clone());
    }

    let report = evaluate(&hypotheses, &reference_sets)?;
    let line = serde_json::to_string(&report).map_err(|e| Error::Parse(e.to_string()))?;
    if json {
        println!("{line}");
    } else {
        println!(
            "bleu4 {:.6}  cider {:.6}  ({} videos, {} references)",
            report.bleu4, report.cider, report.num_videos, report.num_refs_total
        );
    }
    Ok(0)
}

pub fn gradcheck(config_path: Option<&Path>, seed: u64, tolerance: f64, json: bool) -> Exit {
    let model_cfg = match config_path {
        Some(path) => {
            let kv = KvConfig::parse(&fs::read_to_string(path)?)?;
            ModelConfig::from_kv(&kv)?
        }
        // The tiny verification model: 11-token vocab, width 8, one block.
        None => ModelConfig {
            d_model: 8,
            d_hidden: 8,
            num_heads: 2,
            num_blocks: 1,
            dropout_p: 0.0,
            strategy: FusionStrategy::Gate,
            use_dictionary: true,
            fuse_linear: false,
        },
    };
    let report = run_gradcheck(&model_cfg, seed)?;
    if json {
        println!(
            "{}",
            serde_json::json!({
                "max_rel_err": report.max_rel_err,
                "worst_param": report.worst_param,
                "params": report.per_param.len(),
                "pass": report.passes(tolerance),
            })
        );
    } else {
        for check in &report.per_param {
            println!("{:<24} {:.3e}", check.name, check.max_rel_err);
        }
        println!(
            "max relative error {:.3e} at '{}' over {} parameters: {}",
            report.max_rel_err,
            report.worst_param,
            report.per_param.len(),
            if report.passes(tolerance) { "PASS" } else { "FAIL" }
        );
    }
    Ok(if report.passes(tolerance) { 0 } else { 1 })
}

pub fn dump_attention(
    ckpt: &Path,
    corpus_dir: &Path,
    video_id: &str,
    max_len: usize,
    top_k: usize,
    out: Option<&Path>,
) -> Exit {
    let model = load_checkpoint(ckpt)?;
    let corpus = load_corpus(corpus_dir)?;
    let video = corpus
        .video_by_id(video_id)
        .ok_or_else(|| Error::Contract(format!("video '{video_id}' not found in corpus")))?;
    let records = dump_records(&model, video, max_len, top_k)?;

    let mut lines = Vec::with_capacity(records.len());
    for record in &records {
        lines.push(serde_json::to_string(record).map_err(|e| Error::Parse(e.to_string()))?);
    }
    match out {
        Some(path) => {
            let mut w = std::io::BufWriter::new(fs::File::create(path)?);
            for line in &lines {
                writeln!(w, "{line}")?;
            }
            w.flush()?;
        }
        None => {
            for line in &lines {
                println!("{line}");
            }
        }
    }
    Ok(0)
}
