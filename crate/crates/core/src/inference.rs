//! Caption generation: greedy and beam-search decoding plus per-step
//! attention diagnostics.

use serde::Serialize;

use crate::corpus::{Video, BOS_ID, EOS_ID, PAD_ID};
use crate::decoder::DecoderStateValues;
use crate::error::{Error, Result};
use crate::model::{EncodedVideo, Model};

/// Next-token distribution source for the decoders. Implemented by the
/// trained model and by hand-built toy models in tests.
pub trait StepScorer {
    type State: Clone;

    fn initial_state(&self) -> Self::State;

    /// Log-probabilities over the vocabulary after consuming `prev_token`.
    fn step(&self, state: &Self::State, prev_token: u32) -> Result<(Vec<f64>, Self::State)>;
}

/// A scored (partial) caption. `tokens` holds interior tokens only; the
/// score includes the terminating eos log-probability once finished.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub score: f64,
    pub finished: bool,
}

/// Wraps a model plus one encoded video as a [`StepScorer`].
pub struct ModelScorer<'a> {
    model: &'a Model,
    encoded: EncodedVideo,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Model, video: &Video) -> Result<ModelScorer<'a>> {
        let encoded = model.encode_video(&video.features)?;
        Ok(ModelScorer { model, encoded })
    }

    pub fn encoded(&self) -> &EncodedVideo {
        &self.encoded
    }
}

impl StepScorer for ModelScorer<'_> {
    type State = DecoderStateValues;

    fn initial_state(&self) -> DecoderStateValues {
        DecoderStateValues::zeros(self.model.config.d_hidden)
    }

    fn step(&self, state: &DecoderStateValues, prev_token: u32) -> Result<(Vec<f64>, DecoderStateValues)> {
        let (probs, next, _) = self.model.decode_step(&self.encoded, prev_token, state, None)?;
        let log_probs = probs.iter().map(|&p| p.max(1e-12).ln()).collect();
        Ok((log_probs, next))
    }
}

/// Structural tokens never appear inside a generated caption.
fn is_blocked(token: usize) -> bool {
    token == PAD_ID as usize || token == BOS_ID as usize
}

/// Greedy decoding: argmax at each step (ties to the lowest token id),
/// stopping at eos or after `max_len` interior tokens.
pub fn greedy_decode<S: StepScorer>(scorer: &S, max_len: usize) -> Result<Hypothesis> {
    let mut state = scorer.initial_state();
    let mut prev = BOS_ID;
    let mut tokens = Vec::new();
    let mut score = 0.0;
    while tokens.len() < max_len {
        let (log_probs, next) = scorer.step(&state, prev)?;
        let mut best = None;
        for (id, &lp) in log_probs.iter().enumerate() {
            if is_blocked(id) {
                continue;
            }
            // Strictly-greater keeps the lowest id on ties.
            if best.map_or(true, |(_, b)| lp > b) {
                best = Some((id, lp));
            }
        }
        let (id, lp) = best.ok_or_else(|| Error::Contract("empty vocabulary".into()))?;
        score += lp;
        if id == EOS_ID as usize {
            return Ok(Hypothesis { tokens, score, finished: true });
        }
        tokens.push(id as u32);
        state = next;
        prev = id as u32;
    }
    Ok(Hypothesis { tokens, score, finished: false })
}

struct Beam<S> {
    tokens: Vec<u32>,
    score: f64,
    state: S,
    prev: u32,
}

/// Beam search over summed log-probabilities. Finished hypotheses retire
/// to a pool; the ranked pool is returned, falling back to the best
/// unfinished beam when nothing finished within `max_len`. Scores are not
/// length-normalized unless `length_norm` > 0, in which case the final
/// ranking divides by `len^length_norm`.
pub fn beam_search<S: StepScorer>(
    scorer: &S,
    beam_size: usize,
    max_len: usize,
    length_norm: f64,
) -> Result<Vec<Hypothesis>> {
    if beam_size < 1 {
        return Err(Error::Config(format!("beam size must be at least 1, got {beam_size}")));
    }
    let ranking_score = |h: &Hypothesis| -> f64 {
        if length_norm > 0.0 {
            h.score / ((h.tokens.len().max(1)) as f64).powf(length_norm)
        } else {
            h.score
        }
    };

    let mut beams = vec![Beam {
        tokens: Vec::new(),
        score: 0.0,
        state: scorer.initial_state(),
        prev: BOS_ID,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_len {
        let mut candidates: Vec<Beam<S::State>> = Vec::new();
        for beam in &beams {
            let (log_probs, next) = scorer.step(&beam.state, beam.prev)?;
            for (id, &lp) in log_probs.iter().enumerate() {
                if is_blocked(id) {
                    continue;
                }
                let score = beam.score + lp;
                if id == EOS_ID as usize {
                    finished.push(Hypothesis { tokens: beam.tokens.clone(), score, finished: true });
                } else {
                    let mut tokens = beam.tokens.clone();
                    tokens.push(id as u32);
                    candidates.push(Beam { tokens, score, state: next.clone(), prev: id as u32 });
                }
            }
        }
        // Deterministic order: score descending, then token sequence
        // ascending so ties prefer lower ids (matching greedy).
        candidates.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        candidates.truncate(beam_size);
        if candidates.is_empty() {
            break;
        }
        beams = candidates;
    }

    let mut pool = finished;
    if pool.is_empty() {
        // Nothing reached eos: fall back to the surviving beams.
        pool = beams
            .into_iter()
            .map(|b| Hypothesis { tokens: b.tokens, score: b.score, finished: false })
            .collect();
    }
    pool.sort_by(|a, b| {
        ranking_score(b)
            .partial_cmp(&ranking_score(a))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    Ok(pool)
}

/// A dictionary concept index with its average attention weight.
#[derive(Clone, Debug, Serialize)]
pub struct ConceptWeight {
    pub index: usize,
    pub weight: f64,
}

/// One decode step's diagnostics, serialized as a JSON line by the CLI.
#[derive(Clone, Debug, Serialize)]
pub struct AttentionRecord {
    pub step: usize,
    pub token_id: u32,
    pub token: String,
    pub alpha_video: Vec<f64>,
    pub alpha_concepts: Vec<f64>,
    pub lambda_mean: Option<f64>,
    /// Top dictionary concepts by frame-averaged first-block similarity;
    /// identical across steps of one video.
    pub top_concepts: Vec<ConceptWeight>,
}

/// Frame-averaged attention mass per dictionary concept, descending.
pub fn concept_mass(encoded: &EncodedVideo) -> Option<Vec<ConceptWeight>> {
    let sim = encoded.similarity.as_ref()?;
    let mut mass: Vec<ConceptWeight> = (0..sim.cols())
        .map(|j| {
            let total: f64 = (0..sim.rows()).map(|r| sim.get(r, j)).sum();
            ConceptWeight { index: j, weight: total / sim.rows() as f64 }
        })
        .collect();
    mass.sort_by(|a, b| b.weight.partial_cmp(&a.weight).unwrap_or(std::cmp::Ordering::Equal));
    Some(mass)
}

/// Greedy-decode a video while recording attention weights, the gate mean,
/// and the strongest dictionary concepts at every step.
pub fn dump_attention(model: &Model, video: &Video, max_len: usize, top_k: usize) -> Result<Vec<AttentionRecord>> {
    let encoded = model.encode_video(&video.features)?;
    let top: Vec<ConceptWeight> = concept_mass(&encoded)
        .map(|mass| mass.into_iter().take(top_k).collect())
        .unwrap_or_default();

    let mut records = Vec::new();
    let mut state = DecoderStateValues::zeros(model.config.d_hidden);
    let mut prev = BOS_ID;
    for step in 0..max_len {
        let (probs, next, diag) = model.decode_step(&encoded, prev, &state, None)?;
        let mut best = None;
        for (id, &p) in probs.iter().enumerate() {
            if is_blocked(id) {
                continue;
            }
            if best.map_or(true, |(_, b)| p > b) {
                best = Some((id, p));
            }
        }
        let (id, _) = best.expect("vocabulary is never empty");
        records.push(AttentionRecord {
            step,
            token_id: id as u32,
            token: model.vocab.token(id as u32).to_string(),
            alpha_video: diag.alpha_frames.data().to_vec(),
            alpha_concepts: diag.alpha_concepts.data().to_vec(),
            lambda_mean: diag
                .lambda
                .as_ref()
                .map(|l| l.data().iter().sum::<f64>() / l.data().len() as f64),
            top_concepts: top.clone(),
        });
        if id == EOS_ID as usize {
            break;
        }
        state = next;
        prev = id as u32;
    }
    Ok(records)
}
