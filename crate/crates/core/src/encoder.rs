//! Visual concept selection: stacked multi-head cross-attention blocks
//! that attend from video frames into the (projected) dictionary and
//! return a refined, video-related concept feature.
//!
//! Raw frame features and dictionary centers share one learned input
//! projection into model space, so the residual connection inside each
//! block stays well-typed. Keys and values are recomputed per block with
//! per-block projections; queries come from the previous block's output.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{NodeId, ParameterStore, Tape, Tensor};

/// Uniform init range for projection weights.
pub const WEIGHT_INIT: f64 = 0.08;
/// Epsilon inside the layer-norm variance.
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct EncoderConfig {
    /// Model width after the input projection.
    pub d_model: usize,
    /// Attention heads per block.
    pub num_heads: usize,
    /// Stacked block count.
    pub num_blocks: usize,
    /// Dropout on each head's attended values (train mode only).
    pub dropout_p: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks < 1 {
            return Err(Error::Config("encoder needs at least one block".to_string()));
        }
        if self.num_heads < 1 || self.d_model % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by head count {}",
                self.d_model, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} out of range", self.dropout_p)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }
}

fn block_name(block: usize, what: &str) -> String {
    format!("enc.block{block}.{what}")
}

/// Register only the shared input projection (enough for the baseline
/// model, which skips the attention blocks entirely).
pub fn register_projection<R: Rng>(
    store: &mut ParameterStore,
    d_in: usize,
    d_model: usize,
    rng: &mut R,
) -> Result<()> {
    store.register(
        "enc.proj.w",
        Tensor::random_uniform(d_in, d_model, -WEIGHT_INIT, WEIGHT_INIT, rng),
    )
}

/// Register the input projection and every block's weights.
pub fn register_params<R: Rng>(
    store: &mut ParameterStore,
    cfg: &EncoderConfig,
    d_in: usize,
    rng: &mut R,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_model;
    register_projection(store, d_in, d, rng)?;
    for b in 0..cfg.num_blocks {
        for w in ["wq", "wk", "wv", "wo"] {
            store.register(
                &block_name(b, w),
                Tensor::random_uniform(d, d, -WEIGHT_INIT, WEIGHT_INIT, rng),
            )?;
        }
        store.register(&block_name(b, "ln_gain"), Tensor::filled(1, d, 1.0))?;
        store.register(&block_name(b, "ln_bias"), Tensor::zeros(1, d))?;
    }
    Ok(())
}

/// Project raw features (frames or dictionary centers) into model space.
pub fn project(tape: &mut Tape, store: &ParameterStore, raw: NodeId) -> Result<NodeId> {
    let w = tape.param(store, "enc.proj.w")?;
    tape.matmul(raw, w)
}

/// softmax(Q K^T / sqrt(d_head)): one attention distribution over the
/// dictionary entries per query row.
pub fn scaled_similarity(tape: &mut Tape, q: NodeId, k: NodeId) -> Result<NodeId> {
    let d_head = tape.value(q).cols();
    let logits = tape.matmul_nt(q, k)?;
    let scaled = tape.scale(logits, 1.0 / (d_head as f64).sqrt());
    tape.softmax_rows(scaled)
}

/// Output of [`encode`]: the projected frames, the concept feature from
/// the last block, and the first block's per-head similarity maps.
pub struct Encoding {
    pub frames: NodeId,
    pub concepts: NodeId,
    pub first_block_similarity: Vec<NodeId>,
}

/// One cross-attention block: multi-head attention from `x` into the
/// projected dictionary, output projection, then residual layer norm.
/// Returns the block output and the per-head similarity maps.
fn attention_block<R: Rng>(
    tape: &mut Tape,
    store: &ParameterStore,
    x: NodeId,
    dict_proj: NodeId,
    block: usize,
    cfg: &EncoderConfig,
    train: bool,
    rng: &mut R,
) -> Result<(NodeId, Vec<NodeId>)> {
    let wq = tape.param(store, &block_name(block, "wq"))?;
    let wk = tape.param(store, &block_name(block, "wk"))?;
    let wv = tape.param(store, &block_name(block, "wv"))?;
    let wo = tape.param(store, &block_name(block, "wo"))?;

    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(dict_proj, wk)?;
    let v = tape.matmul(dict_proj, wv)?;

    let d_head = cfg.head_dim();
    let mut head_outputs = Vec::with_capacity(cfg.num_heads);
    let mut similarities = Vec::with_capacity(cfg.num_heads);
    for h in 0..cfg.num_heads {
        let offset = h * d_head;
        let qh = tape.slice_cols(q, offset, d_head)?;
        let kh = tape.slice_cols(k, offset, d_head)?;
        let vh = tape.slice_cols(v, offset, d_head)?;
        let sim = scaled_similarity(tape, qh, kh)?;
        let attended = tape.matmul(sim, vh)?;
        let dropped = tape.dropout(attended, cfg.dropout_p, train, rng)?;
        head_outputs.push(dropped);
        similarities.push(sim);
    }
    let fused = tape.concat_cols(&head_outputs)?;
    let projected = tape.matmul(fused, wo)?;

    let gain = tape.param(store, &block_name(block, "ln_gain"))?;
    let bias = tape.param(store, &block_name(block, "ln_bias"))?;
    let normed = tape.layer_norm(projected, gain, bias, LN_EPS)?;
    let out = tape.add(x, normed)?;
    Ok((out, similarities))
}

/// Run the stacked blocks: block 0 queries with the projected frames,
/// each later block queries with its predecessor's output; keys and
/// values always come from the projected dictionary.
pub fn encode<R: Rng>(
    tape: &mut Tape,
    store: &ParameterStore,
    v_raw: NodeId,
    dict_raw: NodeId,
    cfg: &EncoderConfig,
    train: bool,
    rng: &mut R,
) -> Result<Encoding> {
    cfg.validate()?;
    let frames = project(tape, store, v_raw)?;
    let dict_proj = project(tape, store, dict_raw)?;

    let mut x = frames;
    let mut first_sim = Vec::new();
    for b in 0..cfg.num_blocks {
        let (out, sims) = attention_block(tape, store, x, dict_proj, b, cfg, train, rng)?;
        if b == 0 {
            first_sim = sims;
        }
        x = out;
    }
    Ok(Encoding { frames, concepts: x, first_block_similarity: first_sim })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_grad, relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn no_dropout() -> EncoderConfig {
        EncoderConfig { d_model: 4, num_heads: 2, num_blocks: 1, dropout_p: 0.0 }
    }

    #[test]
    fn config_validation() {
        assert!(no_dropout().validate().is_ok());
        let bad_heads = EncoderConfig { num_heads: 3, ..no_dropout() };
        assert!(matches!(bad_heads.validate(), Err(Error::Config(_))));
        let no_blocks = EncoderConfig { num_blocks: 0, ..no_dropout() };
        assert!(matches!(no_blocks.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn similarity_over_single_key_is_all_ones() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = tape.constant(Tensor::random_uniform(5, 3, -1.0, 1.0, &mut rng));
        let k = tape.constant(Tensor::random_uniform(1, 3, -1.0, 1.0, &mut rng));
        let s = scaled_similarity(&mut tape, q, k).unwrap();
        assert_eq!(tape.value(s).shape(), (5, 1));
        for r in 0..5 {
            assert_eq!(tape.value(s).get(r, 0), 1.0);
        }
    }

    #[test]
    fn similarity_concentrates_on_matching_key() {
        let mut tape = Tape::new();
        let scale = 12.0;
        let q = tape.constant(Tensor::from_rows(&[vec![scale, 0.0]]).unwrap());
        let k = tape.constant(
            Tensor::from_rows(&[vec![scale, 0.0], vec![0.0, scale], vec![0.0, -scale]]).unwrap(),
        );
        let s = scaled_similarity(&mut tape, q, k).unwrap();
        assert!(tape.value(s).get(0, 0) > 0.99, "mass {}", tape.value(s).get(0, 0));
    }

    #[test]
    fn similarity_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::random_uniform(6, 4, -2.0, 2.0, &mut rng));
        let k = tape.constant(Tensor::random_uniform(9, 4, -2.0, 2.0, &mut rng));
        let s = scaled_similarity(&mut tape, q, k).unwrap();
        for r in 0..6 {
            let sum: f64 = tape.value(s).row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    fn setup_store(cfg: &EncoderConfig, d_in: usize, seed: u64) -> ParameterStore {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        register_params(&mut store, cfg, d_in, &mut rng).unwrap();
        store
    }

    #[test]
    fn zero_output_projection_gives_residual_identity() {
        let cfg = no_dropout();
        let mut store = setup_store(&cfg, 4, 3);
        *store.value_mut("enc.block0.wo").unwrap() = Tensor::zeros(4, 4);
        // ln_bias is already zero; LN of the zero matrix is then exactly zero.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::random_uniform(3, 4, -1.0, 1.0, &mut rng));
        let dict = tape.constant(Tensor::random_uniform(5, 4, -1.0, 1.0, &mut rng));
        let enc = encode(&mut tape, &store, v, dict, &cfg, false, &mut rng).unwrap();
        let frames = tape.value(enc.frames).clone();
        assert_eq!(tape.value(enc.concepts), &frames);
    }

    #[test]
    fn output_shape_is_frames_by_d_model() {
        let cfg = EncoderConfig { num_blocks: 2, ..no_dropout() };
        let store = setup_store(&cfg, 6, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for m in [1usize, 3, 8] {
            let mut tape = Tape::new();
            let v = tape.constant(Tensor::random_uniform(5, 6, -1.0, 1.0, &mut rng));
            let dict = tape.constant(Tensor::random_uniform(m, 6, -1.0, 1.0, &mut rng));
            let enc = encode(&mut tape, &store, v, dict, &cfg, false, &mut rng).unwrap();
            assert_eq!(tape.value(enc.concepts).shape(), (5, 4));
            assert_eq!(enc.first_block_similarity.len(), 2);
            assert_eq!(tape.value(enc.first_block_similarity[0]).shape(), (5, m));
        }
    }

    /// A single-head block on 2x2 matrices, checked against scalar
    /// arithmetic written out by hand.
    #[test]
    fn single_head_block_matches_hand_computation() {
        let cfg = EncoderConfig { d_model: 2, num_heads: 1, num_blocks: 1, dropout_p: 0.0 };
        let mut store = ParameterStore::new();
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        store.register("enc.proj.w", eye.clone()).unwrap();
        store.register("enc.block0.wq", eye.clone()).unwrap();
        store.register("enc.block0.wk", eye.clone()).unwrap();
        store
            .register("enc.block0.wv", Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap())
            .unwrap();
        store.register("enc.block0.wo", eye).unwrap();
        store.register("enc.block0.ln_gain", Tensor::filled(1, 2, 1.0)).unwrap();
        store.register("enc.block0.ln_bias", Tensor::zeros(1, 2)).unwrap();

        let x = [1.0, 2.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::row_vec(&x));
        let dict = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let enc = encode(&mut tape, &store, v, dict, &cfg, false, &mut rng).unwrap();

        // By hand: Q = x, K = I, V_c = [[1,1],[0,1]].
        // logits = [x0, x1] / sqrt(2); softmax; context = [s0*1, s0*1 + s1*1].
        let root2 = 2.0_f64.sqrt();
        let (l0, l1) = (x[0] / root2, x[1] / root2);
        let m = l0.max(l1);
        let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
        let (s0, s1) = (e0 / (e0 + e1), e1 / (e0 + e1));
        let ctx = [s0, s0 + s1];
        let mean = (ctx[0] + ctx[1]) / 2.0;
        let var = ((ctx[0] - mean).powi(2) + (ctx[1] - mean).powi(2)) / 2.0;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        let expected = [x[0] + (ctx[0] - mean) * inv, x[1] + (ctx[1] - mean) * inv];

        let got = tape.value(enc.concepts);
        for c in 0..2 {
            assert!(
                (got.get(0, c) - expected[c]).abs() < 1e-12,
                "col {c}: {} vs {}",
                got.get(0, c),
                expected[c]
            );
        }
    }

    #[test]
    fn permuting_dictionary_rows_leaves_output_unchanged() {
        let cfg = EncoderConfig { d_model: 6, num_heads: 3, num_blocks: 2, dropout_p: 0.0 };
        let store = setup_store(&cfg, 5, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let v_raw = Tensor::random_uniform(4, 5, -1.0, 1.0, &mut rng);
        let dict_raw = Tensor::random_uniform(6, 5, -1.0, 1.0, &mut rng);

        let run = |dict: &Tensor| -> Tensor {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut tape = Tape::new();
            let v = tape.constant(v_raw.clone());
            let d = tape.constant(dict.clone());
            let enc = encode(&mut tape, &store, v, d, &cfg, false, &mut rng).unwrap();
            tape.value(enc.concepts).clone()
        };

        let base = run(&dict_raw);
        let perm = [4usize, 0, 5, 2, 1, 3];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&r| dict_raw.row(r).to_vec()).collect();
        let permuted = run(&Tensor::from_rows(&rows).unwrap());
        assert!(base.max_abs_diff(&permuted) < 1e-6);
    }

    #[test]
    fn eval_forward_is_bit_deterministic() {
        let cfg = EncoderConfig { dropout_p: 0.4, ..no_dropout() };
        let store = setup_store(&cfg, 4, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v_raw = Tensor::random_uniform(3, 4, -1.0, 1.0, &mut rng);
        let dict_raw = Tensor::random_uniform(4, 4, -1.0, 1.0, &mut rng);
        let run = || -> Tensor {
            let mut rng = ChaCha8Rng::seed_from_u64(123);
            let mut tape = Tape::new();
            let v = tape.constant(v_raw.clone());
            let d = tape.constant(dict_raw.clone());
            let enc = encode(&mut tape, &store, v, d, &cfg, false, &mut rng).unwrap();
            tape.value(enc.concepts).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let cfg = EncoderConfig { d_model: 4, num_heads: 2, num_blocks: 2, dropout_p: 0.0 };
        let mut store = setup_store(&cfg, 4, 13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let v_raw = Tensor::random_uniform(2, 4, -1.0, 1.0, &mut rng);
        let dict_raw = Tensor::random_uniform(3, 4, -1.0, 1.0, &mut rng);

        let forward = |s: &ParameterStore, grads: Option<&mut ParameterStore>| -> crate::Result<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut tape = Tape::new();
            let v = tape.constant(v_raw.clone());
            let d = tape.constant(dict_raw.clone());
            let enc = encode(&mut tape, s, v, d, &cfg, false, &mut rng)?;
            // Sum of all output entries (scaled) as a scalar loss.
            let col_mean = tape.mean_rows(enc.concepts);
            let picks: Vec<_> = (0..4).map(|c| tape.pick(col_mean, 0, c).unwrap()).collect();
            let total = tape.add_all(&picks)?;
            let loss = tape.scale(total, 1.7);
            if let Some(out) = grads {
                tape.backward(loss, out)?;
            }
            Ok(tape.scalar_value(loss))
        };

        let mut analytic = store.clone();
        analytic.zero_grads();
        forward(&store, Some(&mut analytic)).unwrap();
        let mut f = |s: &ParameterStore| forward(s, None);
        let numeric = finite_difference_grad(&mut f, &mut store, 1e-5).unwrap();

        let mut worst = 0.0_f64;
        for (name, grad) in &numeric {
            let a = analytic.grad(name).unwrap();
            for (ga, gn) in a.data().iter().zip(grad.data().iter()) {
                worst = worst.max(relative_error(*ga, *gn));
            }
        }
        assert!(worst < 1e-6, "worst relative error {worst}");
    }
}
