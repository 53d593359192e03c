//! Teacher-forced training: vocabulary building, train/val split, the
//! epoch loop with Adam, and best-checkpoint selection by held-out loss.

pub mod adam;
pub mod gradcheck;
pub mod loss;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::corpus::{build_vocabulary, tokenize_caption, Caption, Corpus, Vocabulary};
use crate::dictionary::VideoDictionary;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::Tape;

pub use adam::{adam_step, clip_global_norm, AdamState};
pub use gradcheck::{compare_grads, gradcheck, GradcheckReport};
pub use loss::sequence_cross_entropy;

/// One tokenized training example.
#[derive(Clone, Debug)]
pub struct Example {
    pub video_idx: usize,
    pub token_ids: Vec<u32>,
}

/// One line of the training log (JSON per line on disk).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_token_acc: f64,
    pub wall_time_s: f64,
}

/// Prepared data for the epoch loop.
pub struct PreparedData {
    pub vocab: Vocabulary,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

/// Split videos into train/val by seed, build the vocabulary from the
/// train captions only, and tokenize everything.
pub fn prepare_data(corpus: &Corpus, cfg: &TrainConfig) -> Result<PreparedData> {
    if corpus.videos.is_empty() {
        return Err(Error::Config("corpus has no videos".into()));
    }
    if corpus.captions.is_empty() {
        return Err(Error::Config("corpus has no captions".into()));
    }
    let n = corpus.videos.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5EED));
    order.shuffle(&mut rng);
    let val_count = ((n as f64) * cfg.val_fraction).round() as usize;
    let val_count = val_count.min(n - 1);
    let val_videos: std::collections::BTreeSet<usize> = order[..val_count].iter().copied().collect();

    let index_of = |id: &str| corpus.videos.iter().position(|v| v.id == id);

    let mut train_tokens: Vec<Vec<String>> = Vec::new();
    for (vid, text) in &corpus.captions {
        let idx = index_of(vid)
            .ok_or_else(|| Error::Config(format!("caption references unknown video '{vid}'")))?;
        if !val_videos.contains(&idx) {
            train_tokens.push(tokenize_caption(text, cfg.max_caption_len));
        }
    }
    if train_tokens.is_empty() {
        return Err(Error::Config("no training captions left after the split".into()));
    }
    let vocab = build_vocabulary(&train_tokens, cfg.min_occurrences);

    let mut train = Vec::new();
    let mut val = Vec::new();
    for (vid, text) in &corpus.captions {
        let idx = index_of(vid).expect("checked above");
        let ids = vocab.encode(&tokenize_caption(text, cfg.max_caption_len));
        let caption = Caption::new(vid.clone(), ids)?;
        let example = Example { video_idx: idx, token_ids: caption.token_ids };
        if val_videos.contains(&idx) {
            val.push(example);
        } else {
            train.push(example);
        }
    }
    Ok(PreparedData { vocab, train, val })
}

/// Mean per-sequence loss and token accuracy under teacher forcing, in
/// eval mode (no dropout).
pub fn evaluate_teacher_forced(
    model: &Model,
    corpus: &Corpus,
    examples: &[Example],
) -> Result<(f64, f64)> {
    if examples.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut total = 0usize;
    for example in examples {
        let mut tape = Tape::new();
        let features = &corpus.videos[example.video_idx].features;
        let fwd = model.forward_example(&mut tape, features, &example.token_ids, false, &mut rng)?;
        loss_sum += tape.scalar_value(fwd.loss);
        for (p, &target) in fwd.probs.iter().zip(fwd.targets.iter()) {
            let row = tape.value(*p).data();
            let mut argmax = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[argmax] {
                    argmax = i;
                }
            }
            if argmax as u32 == target {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok((loss_sum / examples.len() as f64, correct as f64 / total as f64))
}

/// Trained model plus its log.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    /// Epoch whose held-out loss selected the returned weights.
    pub best_epoch: usize,
}

/// The full training loop. Deterministic given the config seed: the data
/// split, weight init, shuffling, and dropout all derive from it.
pub fn train(
    corpus: &Corpus,
    dictionary: Option<VideoDictionary>,
    model_cfg: ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    let (d_appearance, d_motion) = corpus.feature_dims()?;
    let data = prepare_data(corpus, train_cfg)?;

    let mut model = Model::new(
        model_cfg,
        data.vocab.clone(),
        dictionary,
        d_appearance,
        d_motion,
        train_cfg.seed,
    )?;
    if model.config.use_dictionary && !train_cfg.fixed_dictionary {
        model.enable_joint_dictionary()?;
    }

    // Validation metrics fall back to the train set when nothing is held out.
    let eval_set: &[Example] = if data.val.is_empty() { &data.train } else { &data.val };

    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed.wrapping_add(0x7EA1));
    let mut adam = AdamState::new();
    let mut log = Vec::with_capacity(train_cfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 1..=train_cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(train_cfg.batch_size) {
            model.store.zero_grads();
            let mut tape = Tape::new();
            let mut losses = Vec::with_capacity(batch.len());
            for &idx in batch {
                let example = &data.train[idx];
                let features = &corpus.videos[example.video_idx].features;
                let fwd =
                    model.forward_example(&mut tape, features, &example.token_ids, true, &mut rng)?;
                losses.push(fwd.loss);
            }
            let total = tape.add_all(&losses)?;
            let mean = tape.scale(total, 1.0 / batch.len() as f64);
            tape.backward(mean, &mut model.store)?;
            adam_step(&mut model.store, &mut adam, train_cfg)?;
            loss_sum += tape.scalar_value(total);
            seen += batch.len();
        }
        model.sync_dictionary_from_store()?;

        let train_loss = loss_sum / seen as f64;
        let (val_loss, val_token_acc) = evaluate_teacher_forced(&model, corpus, eval_set)?;
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            val_token_acc,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        if best.as_ref().map_or(true, |(loss, _, _)| val_loss < *loss) {
            best = Some((val_loss, epoch, model.clone()));
        }
    }

    let (_, best_epoch, best_model) = best.ok_or_else(|| Error::Training("no epochs ran".into()))?;
    Ok(TrainOutcome { model: best_model, log, best_epoch })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth::{generate, SynthConfig};
    use crate::dictionary::{kmeans_fit, pool_frames, KmeansOptions};

    fn small_setup(seed: u64) -> (Corpus, VideoDictionary) {
        let synth = generate(&SynthConfig {
            seed,
            num_videos: 6,
            num_concepts: 2,
            frames_per_video: 4,
            d_appearance: 4,
            d_motion: 4,
            noise_sigma: 0.3,
            captions_per_video: 2,
            pair_probability: 0.3,
        })
        .unwrap();
        let pool = pool_frames(&synth.corpus.videos).unwrap();
        let dict = kmeans_fit(&pool, 2, &KmeansOptions::default()).unwrap();
        (synth.corpus, dict)
    }

    fn small_model_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            d_hidden: 8,
            num_heads: 2,
            num_blocks: 1,
            dropout_p: 0.1,
            ..ModelConfig::default()
        }
    }

    fn small_train_cfg() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            epochs: 2,
            seed: 3,
            val_fraction: 0.34,
            min_occurrences: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn one_epoch_smoke_run_has_finite_loss() {
        let (corpus, dict) = small_setup(1);
        let cfg = TrainConfig { epochs: 1, ..small_train_cfg() };
        let outcome = train(&corpus, Some(dict), small_model_cfg(), &cfg).unwrap();
        assert_eq!(outcome.log.len(), 1);
        assert!(outcome.log[0].train_loss.is_finite());
        assert!(outcome.log[0].val_loss.is_finite());
        assert!(outcome.best_epoch >= 1);
    }

    #[test]
    fn same_seed_gives_identical_loss_curves() {
        let (corpus, dict) = small_setup(2);
        let cfg = small_train_cfg();
        let a = train(&corpus, Some(dict.clone()), small_model_cfg(), &cfg).unwrap();
        let b = train(&corpus, Some(dict), small_model_cfg(), &cfg).unwrap();
        for (la, lb) in a.log.iter().zip(b.log.iter()) {
            assert_eq!(la.train_loss.to_bits(), lb.train_loss.to_bits());
            assert_eq!(la.val_loss.to_bits(), lb.val_loss.to_bits());
            assert_eq!(la.val_token_acc.to_bits(), lb.val_token_acc.to_bits());
        }
    }

    #[test]
    fn fixed_dictionary_is_untouched_and_joint_changes_it() {
        let (corpus, dict) = small_setup(3);
        let before = dict.centers.clone();

        let fixed_cfg = TrainConfig { fixed_dictionary: true, ..small_train_cfg() };
        let fixed = train(&corpus, Some(dict.clone()), small_model_cfg(), &fixed_cfg).unwrap();
        assert_eq!(fixed.model.dictionary.as_ref().unwrap().centers, before);

        let joint_cfg = TrainConfig { fixed_dictionary: false, ..small_train_cfg() };
        let joint = train(&corpus, Some(dict), small_model_cfg(), &joint_cfg).unwrap();
        let after = &joint.model.dictionary.as_ref().unwrap().centers;
        assert_ne!(after, &before, "joint training should move at least one center");
    }

    #[test]
    fn batch_loss_is_order_invariant() {
        let (corpus, dict) = small_setup(4);
        let cfg = small_train_cfg();
        let data = prepare_data(&corpus, &cfg).unwrap();
        let model = Model::new(
            small_model_cfg(),
            data.vocab.clone(),
            Some(dict),
            4,
            4,
            cfg.seed,
        )
        .unwrap();

        let batch_loss = |indices: &[usize]| -> f64 {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut tape = Tape::new();
            let mut losses = Vec::new();
            for &i in indices {
                let ex = &data.train[i];
                let feats = &corpus.videos[ex.video_idx].features;
                let fwd = model
                    .forward_example(&mut tape, feats, &ex.token_ids, false, &mut rng)
                    .unwrap();
                losses.push(fwd.loss);
            }
            let total = tape.add_all(&losses).unwrap();
            let mean = tape.scale(total, 1.0 / indices.len() as f64);
            tape.scalar_value(mean)
        };

        let forward = batch_loss(&[0, 1, 2, 3]);
        let reversed = batch_loss(&[3, 2, 1, 0]);
        assert!((forward - reversed).abs() < 1e-12, "{forward} vs {reversed}");
    }

    #[test]
    fn dimension_mismatch_fails_before_first_step() {
        let (corpus, _) = small_setup(5);
        let bad_dict = VideoDictionary {
            centers: crate::numerics::Tensor::zeros(2, 5),
            meta: Default::default(),
        };
        let err = train(&corpus, Some(bad_dict), small_model_cfg(), &small_train_cfg()).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }
}
