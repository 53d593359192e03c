//! Corpus-level BLEU-4 and CIDEr over tokenized captions.
//!
//! Tokens must come from the same tokenizer as training. N-gram maps are
//! ordered so scores are bit-reproducible across runs.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};

const MAX_NGRAM: usize = 4;
/// Added to zero n-gram precisions so short corpora stay scoreable.
const BLEU_EPSILON: f64 = 1e-9;
/// CIDEr scores are conventionally reported scaled by ten.
const CIDER_SCALE: f64 = 10.0;

type NgramCounts = BTreeMap<String, f64>;

fn ngram_counts(tokens: &[String], n: usize) -> NgramCounts {
    let mut counts = NgramCounts::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window.join("\u{1}")).or_insert(0.0) += 1.0;
        }
    }
    counts
}

fn check_inputs(hypotheses: &[Vec<String>], reference_sets: &[Vec<Vec<String>>]) -> Result<()> {
    if hypotheses.is_empty() {
        return Err(Error::Contract("no hypotheses to score".into()));
    }
    if hypotheses.len() != reference_sets.len() {
        return Err(Error::Contract(format!(
            "{} hypotheses but {} reference sets",
            hypotheses.len(),
            reference_sets.len()
        )));
    }
    if reference_sets.iter().any(|refs| refs.is_empty()) {
        return Err(Error::Contract("every hypothesis needs at least one reference".into()));
    }
    Ok(())
}

/// Corpus BLEU-4: geometric mean of clipped n-gram precisions (n = 1..4)
/// with the brevity penalty from closest-reference lengths. Zero
/// precisions are replaced by 1e-9.
pub fn bleu4(hypotheses: &[Vec<String>], reference_sets: &[Vec<Vec<String>>]) -> Result<f64> {
    check_inputs(hypotheses, reference_sets)?;

    let mut matches = [0.0_f64; MAX_NGRAM];
    let mut totals = [0.0_f64; MAX_NGRAM];
    let mut hyp_len_total = 0usize;
    let mut ref_len_total = 0usize;

    for (hyp, refs) in hypotheses.iter().zip(reference_sets.iter()) {
        hyp_len_total += hyp.len();
        // Closest reference length; ties prefer the shorter reference.
        let closest = refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&len| (len.abs_diff(hyp.len()), len))
            .expect("non-empty reference set");
        ref_len_total += closest;

        for n in 1..=MAX_NGRAM {
            let hyp_counts = ngram_counts(hyp, n);
            let mut max_ref_counts = NgramCounts::new();
            for reference in refs {
                for (gram, &count) in &ngram_counts(reference, n) {
                    let entry = max_ref_counts.entry(gram.clone()).or_insert(0.0);
                    if count > *entry {
                        *entry = count;
                    }
                }
            }
            for (gram, &count) in &hyp_counts {
                let clip = max_ref_counts.get(gram).copied().unwrap_or(0.0);
                matches[n - 1] += count.min(clip);
                totals[n - 1] += count;
            }
        }
    }

    let mut log_sum = 0.0;
    for n in 0..MAX_NGRAM {
        let precision = if totals[n] > 0.0 && matches[n] > 0.0 {
            matches[n] / totals[n]
        } else {
            BLEU_EPSILON
        };
        log_sum += precision.ln();
    }
    let brevity = if hyp_len_total == 0 {
        0.0
    } else if hyp_len_total > ref_len_total {
        1.0
    } else {
        (1.0 - ref_len_total as f64 / hyp_len_total as f64).exp()
    };
    Ok(brevity * (log_sum / MAX_NGRAM as f64).exp())
}

/// TF-IDF n-gram vector for one sentence. N-grams absent from every
/// reference set carry the maximum weight ln(N) (df clamped to 1), so
/// hallucinated n-grams inflate the hypothesis norm and cost similarity.
fn tfidf_vector(tokens: &[String], n: usize, idf: &NgramCounts, max_idf: f64) -> NgramCounts {
    let mut vec = ngram_counts(tokens, n);
    for (gram, weight) in vec.iter_mut() {
        *weight *= idf.get(gram).copied().unwrap_or(max_idf);
    }
    vec
}

fn cosine(a: &NgramCounts, b: &NgramCounts) -> f64 {
    let dot: f64 = a
        .iter()
        .filter_map(|(gram, &va)| b.get(gram).map(|&vb| va * vb))
        .sum();
    let norm_a: f64 = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let norm_b: f64 = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if norm_a == 0.0 || norm_b == 0.0 {
        0.0
    } else {
        dot / (norm_a * norm_b)
    }
}

/// Per-video CIDEr scores (already scaled by ten). Document frequencies
/// come from the reference corpus: a video counts once per n-gram that
/// appears in any of its references.
pub fn cider_per_video(
    hypotheses: &[Vec<String>],
    reference_sets: &[Vec<Vec<String>>],
) -> Result<Vec<f64>> {
    check_inputs(hypotheses, reference_sets)?;
    let num_videos = reference_sets.len();
    if num_videos == 1 {
        log::warn!("CIDEr over a single video: IDF weights degenerate to zero");
    }
    let log_n = (num_videos as f64).ln();

    // idf[n][gram] = ln(N) - ln(max(df, 1)).
    let mut idf: Vec<NgramCounts> = Vec::with_capacity(MAX_NGRAM);
    for n in 1..=MAX_NGRAM {
        let mut df = NgramCounts::new();
        for refs in reference_sets {
            let mut seen = NgramCounts::new();
            for reference in refs {
                for gram in ngram_counts(reference, n).into_keys() {
                    seen.entry(gram).or_insert(1.0);
                }
            }
            for gram in seen.into_keys() {
                *df.entry(gram).or_insert(0.0) += 1.0;
            }
        }
        idf.push(
            df.into_iter()
                .map(|(gram, count)| (gram, log_n - count.max(1.0).ln()))
                .collect(),
        );
    }

    let mut scores = Vec::with_capacity(hypotheses.len());
    for (hyp, refs) in hypotheses.iter().zip(reference_sets.iter()) {
        let mut total = 0.0;
        for n in 1..=MAX_NGRAM {
            let hyp_vec = tfidf_vector(hyp, n, &idf[n - 1], log_n);
            let mut sim_sum = 0.0;
            for reference in refs {
                let ref_vec = tfidf_vector(reference, n, &idf[n - 1], log_n);
                sim_sum += cosine(&hyp_vec, &ref_vec);
            }
            total += sim_sum / refs.len() as f64;
        }
        scores.push(CIDER_SCALE * total / MAX_NGRAM as f64);
    }
    Ok(scores)
}

/// Corpus CIDEr: mean of the per-video scores.
pub fn cider(hypotheses: &[Vec<String>], reference_sets: &[Vec<Vec<String>>]) -> Result<f64> {
    let scores = cider_per_video(hypotheses, reference_sets)?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// The eval command's report.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub bleu4: f64,
    pub cider: f64,
    pub num_videos: usize,
    pub num_refs_total: usize,
}

pub fn evaluate(hypotheses: &[Vec<String>], reference_sets: &[Vec<Vec<String>>]) -> Result<EvalReport> {
    Ok(EvalReport {
        bleu4: bleu4(hypotheses, reference_sets)?,
        cider: cider(hypotheses, reference_sets)?,
        num_videos: hypotheses.len(),
        num_refs_total: reference_sets.iter().map(Vec::len).sum(),
    })
}
