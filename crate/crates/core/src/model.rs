//! The assembled captioning model: encoder weights, decoder weights,
//! dictionary, and vocabulary, plus teacher-forced and step-wise forward
//! passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::corpus::Vocabulary;
use crate::decoder::{
    self, decoder_step, mean_pool_video, DecoderConfig, DecoderState, DecoderStateValues,
    StepDiagnostics, StepInputs,
};
use crate::dictionary::VideoDictionary;
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::{NodeId, ParameterStore, Tape, Tensor};
use crate::training::loss::sequence_cross_entropy;

/// Store key under which jointly-trained dictionary centers live.
pub const DICT_PARAM: &str = "dict.centers";

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParameterStore,
    /// Present exactly when `config.use_dictionary` is set.
    pub dictionary: Option<VideoDictionary>,
    pub vocab: Vocabulary,
    pub d_appearance: usize,
    pub d_motion: usize,
    /// When set, dictionary centers are a learnable parameter and receive
    /// gradients; otherwise they are constants.
    pub joint_dictionary: bool,
}

impl Model {
    /// Build a freshly initialized model. Weights are drawn uniform in
    /// [-0.08, 0.08] from a dedicated rng stream, biases start at zero.
    pub fn new(
        config: ModelConfig,
        vocab: Vocabulary,
        dictionary: Option<VideoDictionary>,
        d_appearance: usize,
        d_motion: usize,
        seed: u64,
    ) -> Result<Model> {
        let d_in = d_appearance + d_motion;
        if config.use_dictionary {
            let dict = dictionary
                .as_ref()
                .ok_or_else(|| Error::Config("model wants a dictionary but none was given".into()))?;
            if dict.dim() != d_in {
                return Err(Error::Dimension(format!(
                    "dictionary dim {} does not match feature dim {}",
                    dict.dim(),
                    d_in
                )));
            }
        }

        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if config.use_dictionary {
            encoder::register_params(&mut store, &config.encoder(), d_in, &mut rng)?;
        } else {
            encoder::register_projection(&mut store, d_in, config.d_model, &mut rng)?;
        }
        let dec_cfg = config.decoder(vocab.len());
        decoder::register_params(&mut store, &dec_cfg, &mut rng)?;

        Ok(Model {
            config,
            store,
            dictionary: if config.use_dictionary { dictionary } else { None },
            vocab,
            d_appearance,
            d_motion,
            joint_dictionary: false,
        })
    }

    /// Switch the dictionary centers into the parameter store so the
    /// optimizer can update them.
    pub fn enable_joint_dictionary(&mut self) -> Result<()> {
        if self.joint_dictionary {
            return Ok(());
        }
        let dict = self
            .dictionary
            .as_ref()
            .ok_or_else(|| Error::Config("no dictionary to train jointly".into()))?;
        self.store.register(DICT_PARAM, dict.centers.clone())?;
        self.joint_dictionary = true;
        Ok(())
    }

    /// Copy trained center values back out of the store.
    pub fn sync_dictionary_from_store(&mut self) -> Result<()> {
        if !self.joint_dictionary {
            return Ok(());
        }
        let centers = self.store.value(DICT_PARAM)?.clone();
        if let Some(dict) = self.dictionary.as_mut() {
            dict.centers = centers;
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.d_appearance + self.d_motion
    }

    fn dictionary_node(&self, tape: &mut Tape) -> Result<Option<NodeId>> {
        match (&self.dictionary, self.config.use_dictionary) {
            (Some(dict), true) => {
                let node = if self.joint_dictionary {
                    tape.param(&self.store, DICT_PARAM)?
                } else {
                    tape.constant(dict.centers.clone())
                };
                Ok(Some(node))
            }
            _ => Ok(None),
        }
    }

    /// Record the encoder pass for one video on `tape`.
    pub fn encode_on_tape<R: Rng>(
        &self,
        tape: &mut Tape,
        features: &Tensor,
        train: bool,
        rng: &mut R,
    ) -> Result<EncodedNodes> {
        if features.cols() != self.feature_dim() {
            return Err(Error::Dimension(format!(
                "video features are {} wide, model expects {}",
                features.cols(),
                self.feature_dim()
            )));
        }
        let v_raw = tape.constant(features.clone());
        let (frames, concepts, similarity) = match self.dictionary_node(tape)? {
            Some(dict_node) => {
                let enc = encoder::encode(
                    tape,
                    &self.store,
                    v_raw,
                    dict_node,
                    &self.config.encoder(),
                    train,
                    rng,
                )?;
                (enc.frames, enc.concepts, enc.first_block_similarity)
            }
            None => {
                let frames = encoder::project(tape, &self.store, v_raw)?;
                (frames, frames, Vec::new())
            }
        };
        let v_mean = mean_pool_video(tape, frames);
        Ok(EncodedNodes { frames, concepts, v_mean, first_block_similarity: similarity })
    }

    /// Teacher-forced pass over one caption: per-step distributions plus
    /// the per-sequence cross-entropy (sum over steps).
    pub fn forward_example<R: Rng>(
        &self,
        tape: &mut Tape,
        features: &Tensor,
        caption: &[u32],
        train: bool,
        rng: &mut R,
    ) -> Result<ExampleForward> {
        if caption.len() < 2 {
            return Err(Error::Contract("caption needs at least bos and eos".into()));
        }
        let encoded = self.encode_on_tape(tape, features, train, rng)?;
        let inputs = StepInputs {
            frames: encoded.frames,
            concepts: encoded.concepts,
            v_mean: encoded.v_mean,
        };
        let dec_cfg = self.config.decoder(self.vocab.len());
        let mut state = DecoderState::zeros(tape, self.config.d_hidden);
        let mut probs = Vec::with_capacity(caption.len() - 1);
        let mut targets = Vec::with_capacity(caption.len() - 1);
        for t in 1..caption.len() {
            let (p, next, _) =
                decoder_step(tape, &self.store, &dec_cfg, &inputs, caption[t - 1], &state, None)?;
            probs.push(p);
            targets.push(caption[t]);
            state = next;
        }
        let loss = sequence_cross_entropy(tape, &probs, &targets, crate::corpus::PAD_ID)?;
        Ok(ExampleForward { loss, probs, targets })
    }

    /// Eval-mode encoder pass returning detached values for decoding.
    pub fn encode_video(&self, features: &Tensor) -> Result<EncodedVideo> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let nodes = self.encode_on_tape(&mut tape, features, false, &mut rng)?;
        let similarity = if nodes.first_block_similarity.is_empty() {
            None
        } else {
            // Head-averaged first-block similarity, frames x M.
            let mut avg = tape.value(nodes.first_block_similarity[0]).clone();
            for &node in &nodes.first_block_similarity[1..] {
                avg.add_assign(tape.value(node));
            }
            avg.scale_in_place(1.0 / nodes.first_block_similarity.len() as f64);
            Some(avg)
        };
        Ok(EncodedVideo {
            frames: tape.value(nodes.frames).clone(),
            concepts: tape.value(nodes.concepts).clone(),
            v_mean: tape.value(nodes.v_mean).clone(),
            similarity,
        })
    }

    /// One eval-mode decoder step on a throwaway tape.
    pub fn decode_step(
        &self,
        encoded: &EncodedVideo,
        prev_token: u32,
        state: &DecoderStateValues,
        lambda_override: Option<f64>,
    ) -> Result<(Vec<f64>, DecoderStateValues, StepDiagnostics)> {
        let mut tape = Tape::new();
        let inputs = StepInputs {
            frames: tape.constant(encoded.frames.clone()),
            concepts: tape.constant(encoded.concepts.clone()),
            v_mean: tape.constant(encoded.v_mean.clone()),
        };
        let state = DecoderState::from_values(&mut tape, state);
        let dec_cfg = self.config.decoder(self.vocab.len());
        let (p, next, diag) = decoder_step(
            &mut tape,
            &self.store,
            &dec_cfg,
            &inputs,
            prev_token,
            &state,
            lambda_override,
        )?;
        let probs = tape.value(p).data().to_vec();
        let next_values = DecoderStateValues::capture(&tape, &next);
        Ok((probs, next_values, diag))
    }
}

impl ModelConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            num_heads: self.num_heads,
            num_blocks: self.num_blocks,
            dropout_p: self.dropout_p,
        }
    }

    pub fn decoder(&self, vocab_size: usize) -> DecoderConfig {
        DecoderConfig {
            d_model: self.d_model,
            d_hidden: self.d_hidden,
            vocab_size,
            strategy: self.strategy,
            use_dictionary: self.use_dictionary,
            fuse_linear: self.fuse_linear,
            fusion_heads: self.num_heads,
        }
    }
}

/// Encoder outputs as tape nodes (training path).
pub struct EncodedNodes {
    pub frames: NodeId,
    pub concepts: NodeId,
    pub v_mean: NodeId,
    pub first_block_similarity: Vec<NodeId>,
}

/// Encoder outputs as detached values (decoding path).
#[derive(Clone, Debug)]
pub struct EncodedVideo {
    pub frames: Tensor,
    pub concepts: Tensor,
    pub v_mean: Tensor,
    /// Head-averaged first-block attention over dictionary entries
    /// (frames x M); absent for the baseline model.
    pub similarity: Option<Tensor>,
}

/// Result of a teacher-forced example pass.
pub struct ExampleForward {
    /// Per-sequence cross-entropy, a 1x1 node.
    pub loss: NodeId,
    pub probs: Vec<NodeId>,
    pub targets: Vec<u32>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{BOS_ID, EOS_ID};
    use crate::dictionary::{FitMeta, VideoDictionary};

    fn tiny_model(use_dictionary: bool) -> Model {
        let config = ModelConfig {
            d_model: 8,
            d_hidden: 8,
            num_heads: 2,
            num_blocks: 1,
            dropout_p: 0.0,
            use_dictionary,
            ..ModelConfig::default()
        };
        let vocab = Vocabulary::empty();
        let dict = use_dictionary.then(|| VideoDictionary {
            centers: Tensor::filled(4, 6, 0.3),
            meta: FitMeta::default(),
        });
        Model::new(config, vocab, dict, 3, 3, 11).unwrap()
    }

    #[test]
    fn forward_example_produces_finite_scalar_loss() {
        let model = tiny_model(true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let features = Tensor::random_uniform(5, 6, -1.0, 1.0, &mut rng);
        let caption = vec![BOS_ID, 3, 3, EOS_ID];
        let mut tape = Tape::new();
        let fwd = model
            .forward_example(&mut tape, &features, &caption, false, &mut rng)
            .unwrap();
        let loss = tape.scalar_value(fwd.loss);
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(fwd.probs.len(), 3);
        assert_eq!(fwd.targets, vec![3, 3, EOS_ID]);
    }

    #[test]
    fn baseline_model_registers_no_block_or_attention_params() {
        let model = tiny_model(false);
        assert!(model.store.contains("enc.proj.w"));
        assert!(!model.store.contains("enc.block0.wq"));
        assert!(model.dictionary.is_none());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let features = Tensor::random_uniform(4, 6, -1.0, 1.0, &mut rng);
        let encoded = model.encode_video(&features).unwrap();
        assert!(encoded.similarity.is_none());
        assert_eq!(encoded.concepts, encoded.frames);
    }

    #[test]
    fn decode_step_round_trips_state_values() {
        let model = tiny_model(true);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let features = Tensor::random_uniform(4, 6, -1.0, 1.0, &mut rng);
        let encoded = model.encode_video(&features).unwrap();
        let state = DecoderStateValues::zeros(8);
        let (probs, next, diag) = model.decode_step(&encoded, BOS_ID, &state, None).unwrap();
        assert_eq!(probs.len(), model.vocab.len());
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert_ne!(next.h_lang, state.h_lang);
        assert!(diag.lambda.is_some());
        // Deterministic across calls.
        let (probs2, next2, _) = model.decode_step(&encoded, BOS_ID, &state, None).unwrap();
        assert_eq!(probs, probs2);
        assert_eq!(next, next2);
    }

    #[test]
    fn joint_dictionary_round_trip() {
        let mut model = tiny_model(true);
        model.enable_joint_dictionary().unwrap();
        assert!(model.store.contains(DICT_PARAM));
        model
            .store
            .value_mut(DICT_PARAM)
            .unwrap()
            .data_mut()[0] = 9.0;
        model.sync_dictionary_from_store().unwrap();
        assert_eq!(model.dictionary.as_ref().unwrap().centers.get(0, 0), 9.0);
    }

    #[test]
    fn mismatched_dictionary_dim_is_rejected() {
        let config = ModelConfig { d_model: 8, d_hidden: 8, dropout_p: 0.0, ..ModelConfig::default() };
        let dict = VideoDictionary { centers: Tensor::zeros(4, 5), meta: FitMeta::default() };
        let err = Model::new(config, Vocabulary::empty(), Some(dict), 3, 3, 0).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }
}
