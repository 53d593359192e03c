//! Synthetic corpus generator with planted latent concepts.
//!
//! Each latent concept is a Gaussian prototype in feature space paired
//! with three content words (a noun, a verb, a scene). Videos sample one
//! or two concepts; their frames are noisy copies of the prototypes and
//! their captions are filled-in templates. Because features and captions
//! are generated from the same latent concepts, codebook recovery and
//! caption quality can both be checked against ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::corpus::{Corpus, Video};
use crate::error::{Error, Result};
use crate::numerics::{sq_dist, Tensor};

const NOUNS: &[&str] = &[
    "dog", "cat", "horse", "bird", "truck", "guitar", "robot", "child", "dancer", "chef",
    "diver", "plane", "train", "monkey", "skier", "boxer", "farmer", "clown", "turtle", "eagle",
    "violinist", "surfer", "juggler", "welder",
];
const VERBS: &[&str] = &[
    "running", "sleeping", "jumping", "singing", "drifting", "strumming", "spinning", "laughing",
    "twirling", "cooking", "swimming", "gliding", "rolling", "climbing", "skiing", "punching",
    "plowing", "juggling", "crawling", "soaring", "bowing", "surfing", "tossing", "welding",
];
const SCENES: &[&str] = &[
    "park", "kitchen", "beach", "forest", "garage", "studio", "lab", "yard", "stage", "bakery",
    "reef", "hangar", "station", "jungle", "slope", "ring", "field", "circus", "pond", "cliff",
    "hall", "ocean", "market", "workshop",
];

/// Words that appear in templates and are shared across all concepts.
pub const TEMPLATE_WORDS: &[&str] =
    &["a", "is", "in", "the", "keeps", "near", "some", "by", "while", "and", "are"];

/// Knobs for [`generate`]. Mirrors the CLI `gen-data` flags.
#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_videos: usize,
    pub num_concepts: usize,
    pub frames_per_video: usize,
    pub d_appearance: usize,
    pub d_motion: usize,
    pub noise_sigma: f64,
    /// Paraphrase captions per video.
    pub captions_per_video: usize,
    /// Probability that a video carries two latent concepts.
    pub pair_probability: f64,
}

impl Default for SynthConfig {
    fn default() -> SynthConfig {
        SynthConfig {
            seed: 0,
            num_videos: 50,
            num_concepts: 4,
            frames_per_video: 26,
            d_appearance: 32,
            d_motion: 32,
            noise_sigma: 0.5,
            captions_per_video: 2,
            pair_probability: 0.3,
        }
    }
}

/// Which concept a frame is drawn from. Two-concept videos lean on the
/// primary concept two frames in three, so caption order stays inferable
/// from the frame mix.
pub fn frame_concept(concepts: &[usize], frame: usize) -> usize {
    if concepts.len() < 2 || frame % 3 != 2 {
        concepts[0]
    } else {
        concepts[1]
    }
}

/// Generated corpus plus the planted ground truth for verification.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    /// num_concepts x d prototype matrix.
    pub prototypes: Tensor,
    /// Latent concepts of each video, parallel to `corpus.videos`.
    pub video_concepts: Vec<Vec<usize>>,
}

/// The three content words of concept `k`: (noun, verb, scene).
pub fn concept_words(k: usize) -> (String, String, String) {
    if k < NOUNS.len() {
        (NOUNS[k].into(), VERBS[k].into(), SCENES[k].into())
    } else {
        (format!("obj{k}"), format!("act{k}"), format!("loc{k}"))
    }
}

fn single_caption(template: usize, concept: usize) -> String {
    let (n, v, s) = concept_words(concept);
    match template % 3 {
        0 => format!("a {n} is {v} in the {s}"),
        1 => format!("the {n} keeps {v} near the {s}"),
        _ => format!("some {n} is {v} by the {s}"),
    }
}

fn pair_caption(template: usize, first: usize, second: usize) -> String {
    let (n1, v1, s1) = concept_words(first);
    let (n2, v2, _) = concept_words(second);
    match template % 3 {
        0 => format!("a {n1} is {v1} while a {n2} is {v2}"),
        1 => format!("the {n1} keeps {v1} and the {n2} keeps {v2}"),
        _ => format!("a {n1} and a {n2} are {v1} by the {s1}"),
    }
}

/// Draw prototypes with rejection so no pair is closer than half the
/// typical Gaussian separation.
fn draw_prototypes(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Tensor {
    let min_dist_sq = 0.5 * 2.0 * d as f64; // (sqrt(2d)/sqrt(2))^2
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..100 {
            let cand: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let nearest = rows
                .iter()
                .map(|r| sq_dist(r, &cand))
                .fold(f64::INFINITY, f64::min);
            if nearest >= min_dist_sq {
                best = Some((nearest, cand));
                break;
            }
            if best.as_ref().map_or(true, |(b, _)| nearest > *b) {
                best = Some((nearest, cand));
            }
        }
        rows.push(best.expect("at least one candidate").1);
    }
    Tensor::from_rows(&rows).expect("prototype rows are uniform")
}

/// Deterministically generate a corpus with planted concepts.
pub fn generate(cfg: &SynthConfig) -> Result<SyntheticCorpus> {
    if cfg.num_concepts < 1 {
        return Err(Error::Config("need at least one latent concept".into()));
    }
    if cfg.num_videos < cfg.num_concepts {
        return Err(Error::Config(format!(
            "need at least as many videos ({}) as concepts ({})",
            cfg.num_videos, cfg.num_concepts
        )));
    }
    let d = cfg.d_appearance + cfg.d_motion;
    if d < 2 {
        return Err(Error::Config(format!("feature dim d_a + d_m = {d} is degenerate")));
    }
    if cfg.frames_per_video < 1 {
        return Err(Error::Config("need at least one frame per video".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prototypes = draw_prototypes(&mut rng, cfg.num_concepts, d);

    let mut videos = Vec::with_capacity(cfg.num_videos);
    let mut captions = Vec::new();
    let mut video_concepts = Vec::with_capacity(cfg.num_videos);

    for v in 0..cfg.num_videos {
        // The first pass covers every concept once so none is starved.
        let first = if v < cfg.num_concepts { v } else { rng.gen_range(0..cfg.num_concepts) };
        let mut concepts = vec![first];
        if cfg.num_concepts > 1 && rng.gen_bool(cfg.pair_probability.clamp(0.0, 1.0)) {
            let mut second = rng.gen_range(0..cfg.num_concepts - 1);
            if second >= first {
                second += 1;
            }
            concepts.push(second);
        }

        let mut rows = Vec::with_capacity(cfg.frames_per_video);
        for frame in 0..cfg.frames_per_video {
            let proto = prototypes.row(frame_concept(&concepts, frame));
            let row: Vec<f64> = proto
                .iter()
                .map(|&p| {
                    let noisy = p + cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal);
                    // Features are stored as f32 on disk; round now so a
                    // save/load round trip is exact.
                    noisy as f32 as f64
                })
                .collect();
            rows.push(row);
        }
        let id = format!("vid{v:04}");
        let features = Tensor::from_rows(&rows)?;
        videos.push(Video::new(id.clone(), features, cfg.d_appearance, cfg.d_motion)?);

        let mut templates: Vec<usize> = (0..3).collect();
        for c in 0..cfg.captions_per_video {
            // Cycle through paraphrase templates in a shuffled order.
            if c % templates.len() == 0 {
                for i in (1..templates.len()).rev() {
                    templates.swap(i, rng.gen_range(0..=i));
                }
            }
            let template = templates[c % templates.len()];
            let text = match concepts.as_slice() {
                [only] => single_caption(template, *only),
                [a, b] => pair_caption(template, *a, *b),
                _ => unreachable!("videos sample one or two concepts"),
            };
            captions.push((id.clone(), text));
        }
        video_concepts.push(concepts);
    }

    Ok(SyntheticCorpus {
        corpus: Corpus { videos, captions },
        prototypes,
        video_concepts,
    })
}
