//! End-to-end gradient verification: tape backward vs central differences
//! on a tiny randomly initialized model.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::corpus::{Vocabulary, BOS_ID, EOS_ID};
use crate::dictionary::{FitMeta, VideoDictionary};
use crate::error::Result;
use crate::model::Model;
use crate::numerics::{finite_difference_grad, relative_error, ParameterStore, Tape, Tensor};

/// Worst relative error observed for one parameter.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
}

/// Per-parameter comparison of analytic vs numeric gradients.
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub worst_param: String,
}

impl GradcheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Compare accumulated analytic gradients against a numeric gradient map.
/// Every registered parameter appears exactly once in the report.
pub fn compare_grads(
    analytic: &ParameterStore,
    numeric: &BTreeMap<String, Tensor>,
) -> GradcheckReport {
    let mut per_param = Vec::new();
    let mut worst = ("<none>".to_string(), 0.0_f64);
    for (name, param) in analytic.iter() {
        let mut max_err = 0.0_f64;
        if let Some(num) = numeric.get(name) {
            for (&a, &n) in param.grad.data().iter().zip(num.data().iter()) {
                max_err = max_err.max(relative_error(a, n));
            }
        } else {
            max_err = f64::INFINITY;
        }
        if max_err > worst.1 {
            worst = (name.clone(), max_err);
        }
        per_param.push(ParamCheck { name: name.clone(), max_rel_err: max_err });
    }
    GradcheckReport { per_param, max_rel_err: worst.1, worst_param: worst.0 }
}

/// Fixture dims: one L=3 video, an M=4 dictionary, an 11-token vocabulary,
/// and one short caption.
const FIXTURE_FRAMES: usize = 3;
const FIXTURE_CENTERS: usize = 4;
const FIXTURE_WORDS: usize = 7;

/// Build the tiny fixture model used by [`gradcheck`].
pub fn fixture_model(model_cfg: &ModelConfig, seed: u64) -> Result<(Model, Tensor, Vec<u32>)> {
    let mut cfg = *model_cfg;
    cfg.dropout_p = 0.0;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens: Vec<String> = ["<pad>", "<bos>", "<eos>", "<unk>"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..FIXTURE_WORDS).map(|i| format!("w{i}")))
        .collect();
    let vocab = Vocabulary::from_tokens(tokens)?;

    let d_appearance = cfg.d_model - cfg.d_model / 2;
    let d_motion = cfg.d_model / 2;
    let d_in = d_appearance + d_motion;
    let dictionary = cfg.use_dictionary.then(|| VideoDictionary {
        centers: Tensor::random_uniform(FIXTURE_CENTERS, d_in, -1.0, 1.0, &mut rng),
        meta: FitMeta { seed, ..FitMeta::default() },
    });
    let features = Tensor::random_uniform(FIXTURE_FRAMES, d_in, -1.0, 1.0, &mut rng);
    let mut caption = vec![BOS_ID];
    for _ in 0..3 {
        caption.push(4 + rng.gen_range(0..FIXTURE_WORDS as u32));
    }
    caption.push(EOS_ID);

    let model = Model::new(cfg, vocab, dictionary, d_appearance, d_motion, seed ^ 0xA5A5)?;
    Ok((model, features, caption))
}

/// Build the fixture, run one teacher-forced loss, and compare backward
/// against central finite differences (h = 1e-5) for every parameter.
pub fn gradcheck(model_cfg: &ModelConfig, seed: u64) -> Result<GradcheckReport> {
    let (model, features, caption) = fixture_model(model_cfg, seed)?;
    let template = model.clone();
    let mut store = model.store;

    let run = |store_now: &ParameterStore, grads: Option<&mut ParameterStore>| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let eval_model = Model { store: store_now.clone(), ..template.clone() };
        let fwd = eval_model.forward_example(&mut tape, &features, &caption, false, &mut rng)?;
        if let Some(out) = grads {
            tape.backward(fwd.loss, out)?;
        }
        Ok(tape.scalar_value(fwd.loss))
    };

    let mut analytic = store.clone();
    analytic.zero_grads();
    run(&store.clone(), Some(&mut analytic))?;

    let mut f = |s: &ParameterStore| run(s, None);
    let numeric = finite_difference_grad(&mut f, &mut store, 1e-5)?;
    Ok(compare_grads(&analytic, &numeric))
}
