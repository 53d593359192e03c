//! Scratch calibration harness for the ablation-direction experiment.
//! Not part of the deliverable surface; run with --release.

use std::collections::BTreeSet;

use vcrn_core::config::{ModelConfig, TrainConfig};
use vcrn_core::corpus::synth::{generate, SynthConfig};
use vcrn_core::corpus::tokenize_caption;
use vcrn_core::decoder::FusionStrategy;
use vcrn_core::dictionary::{kmeans_fit, pool_frames, KmeansOptions};
use vcrn_core::inference::{beam_search, ModelScorer};
use vcrn_core::metrics::cider;
use vcrn_core::training::{prepare_data, train};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let noise: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1.2);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(120);
    let videos: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(60);
    let lr: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0.003);
    let dm: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(48);

    let variants: [(&str, FusionStrategy, bool); 3] = [
        ("B        ", FusionStrategy::Add, false),
        ("B+VCS    ", FusionStrategy::Add, true),
        ("B+VCS+CIG", FusionStrategy::Gate, true),
    ];
    let mut all: Vec<Vec<f64>> = vec![Vec::new(); 3];

    for seed in 1..=5u64 {
        let synth = generate(&SynthConfig {
            seed,
            num_videos: videos,
            num_concepts: 4,
            frames_per_video: 8,
            d_appearance: 32,
            d_motion: 32,
            noise_sigma: noise,
            captions_per_video: 2,
            pair_probability: 1.0,
        })
        .unwrap();
        let corpus = &synth.corpus;
        let pool = pool_frames(&corpus.videos).unwrap();
        let dict = kmeans_fit(&pool, 4, &KmeansOptions { seed, ..Default::default() }).unwrap();

        for (i, (name, strategy, use_dict)) in variants.iter().enumerate() {
            let model_cfg = ModelConfig {
                d_model: dm,
                d_hidden: dm,
                num_heads: 4,
                num_blocks: 1,
                dropout_p: 0.1,
                strategy: *strategy,
                use_dictionary: *use_dict,
                fuse_linear: false,
            };
            let train_cfg = TrainConfig {
                learning_rate: lr,
                batch_size: 5,
                epochs,
                seed,
                val_fraction: 0.25,
                min_occurrences: 0,
                ..TrainConfig::default()
            };
            let started = std::time::Instant::now();
            let outcome = train(corpus, use_dict.then(|| dict.clone()), model_cfg, &train_cfg).unwrap();
            let data = prepare_data(corpus, &train_cfg).unwrap();
            let val_videos: BTreeSet<usize> = data.val.iter().map(|e| e.video_idx).collect();

            let mut hyps = Vec::new();
            let mut refs = Vec::new();
            for &vi in &val_videos {
                let video = &corpus.videos[vi];
                let scorer = ModelScorer::new(&outcome.model, video).unwrap();
                let best = beam_search(&scorer, 3, 26, 0.0).unwrap();
                let text = outcome.model.vocab.decode_to_text(&best[0].tokens);
                hyps.push(
                    tokenize_caption(&text, 26)
                        .into_iter()
                        .filter(|t| t != "<bos>" && t != "<eos>")
                        .collect::<Vec<_>>(),
                );
                refs.push(
                    corpus
                        .captions_for(&video.id)
                        .iter()
                        .map(|t| {
                            tokenize_caption(t, 26)
                                .into_iter()
                                .filter(|t| t != "<bos>" && t != "<eos>")
                                .collect::<Vec<_>>()
                        })
                        .collect::<Vec<_>>(),
                );
            }
            let score = cider(&hyps, &refs).unwrap();
            all[i].push(score);
            eprintln!(
                "seed {seed} {name} cider {score:8.4}  (val videos {}, {:.1}s, best epoch {})",
                val_videos.len(),
                started.elapsed().as_secs_f64(),
                outcome.best_epoch
            );
        }
    }
    for (i, (name, _, _)) in variants.iter().enumerate() {
        let mut sorted = all[i].clone();
        sorted.sort_by(f64::total_cmp);
        eprintln!("{name} scores {:?} median {:.4}", all[i], sorted[sorted.len() / 2]);
    }
}
