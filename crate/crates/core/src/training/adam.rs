//! Adam with bias correction and global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParameterStore, Tensor};

/// First/second moment accumulators plus the step counter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new() -> AdamState {
        AdamState::default()
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// Scale all gradients so their global l2 norm is at most `max_norm`.
pub fn clip_global_norm(store: &mut ParameterStore, max_norm: f64) -> Result<f64> {
    let mut total_sq = 0.0;
    for (name, param) in store.iter() {
        for &g in param.grad.data() {
            if !g.is_finite() {
                return Err(Error::Training(format!("non-finite gradient in '{name}'")));
            }
            total_sq += g * g;
        }
    }
    let norm = total_sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for (_, param) in store.iter_mut() {
            param.grad.scale_in_place(scale);
        }
    }
    Ok(norm)
}

/// One optimizer step over every parameter, consuming the accumulated
/// gradients (clipped first). Gradients are left in place; callers clear
/// them before the next accumulation.
pub fn adam_step(store: &mut ParameterStore, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    clip_global_norm(store, cfg.grad_clip_norm)?;
    state.t += 1;
    let t = state.t as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);

    for (name, param) in store.iter_mut() {
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(param.value.rows(), param.value.cols()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(param.value.rows(), param.value.cols()));
        let grads = param.grad.data();
        for i in 0..grads.len() {
            let g = grads[i];
            let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * g;
            let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bias1;
            let v_hat = vi / bias2;
            param.value.data_mut()[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64) -> TrainConfig {
        TrainConfig { learning_rate: lr, grad_clip_norm: 0.0, ..TrainConfig::default() }
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = ParameterStore::new();
        store.register("w", Tensor::row_vec(&[1.0, -2.0])).unwrap();
        let mut state = AdamState::new();
        for _ in 0..3 {
            adam_step(&mut store, &mut state, &cfg(0.1)).unwrap();
        }
        assert_eq!(store.value("w").unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_with_unit_gradient_is_minus_lr() {
        let mut store = ParameterStore::new();
        store.register("w", Tensor::scalar(0.5)).unwrap();
        store.accumulate_grad("w", &Tensor::scalar(1.0)).unwrap();
        let mut state = AdamState::new();
        let lr = 0.01;
        adam_step(&mut store, &mut state, &cfg(lr)).unwrap();
        // Bias-corrected m_hat = v_hat = 1 at t = 1, so the update is
        // -lr / (1 + eps).
        let expected = 0.5 - lr / (1.0 + TrainConfig::default().eps);
        assert!((store.value("w").unwrap().get(0, 0) - expected).abs() < 1e-15);
    }

    /// Reference Adam written independently over plain vectors.
    struct ReferenceAdam {
        m: Vec<f64>,
        v: Vec<f64>,
        t: u64,
    }

    impl ReferenceAdam {
        fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64) {
            self.t += 1;
            for i in 0..params.len() {
                self.m[i] = b1 * self.m[i] + (1.0 - b1) * grads[i];
                self.v[i] = b2 * self.v[i] + (1.0 - b2) * grads[i] * grads[i];
                let m_hat = self.m[i] / (1.0 - b1.powi(self.t as i32));
                let v_hat = self.v[i] / (1.0 - b2.powi(self.t as i32));
                params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    #[test]
    fn matches_reference_over_ten_steps() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = 6;
        let init: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut store = ParameterStore::new();
        store.register("w", Tensor::row_vec(&init)).unwrap();
        let mut state = AdamState::new();
        let c = cfg(0.05);

        let mut reference = init.clone();
        let mut ref_state = ReferenceAdam { m: vec![0.0; n], v: vec![0.0; n], t: 0 };

        for step in 0..10 {
            let grads: Vec<f64> = (0..n).map(|i| ((step + i) as f64 * 0.37).sin()).collect();
            store.zero_grads();
            store.accumulate_grad("w", &Tensor::row_vec(&grads)).unwrap();
            adam_step(&mut store, &mut state, &c).unwrap();
            ref_state.step(&mut reference, &grads, c.learning_rate, c.beta1, c.beta2, c.eps);
        }
        for (got, want) in store.value("w").unwrap().data().iter().zip(reference.iter()) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut store = ParameterStore::new();
        store.register("a", Tensor::row_vec(&[3.0])).unwrap();
        store.register("b", Tensor::row_vec(&[4.0])).unwrap();
        store.accumulate_grad("a", &Tensor::row_vec(&[3.0])).unwrap();
        store.accumulate_grad("b", &Tensor::row_vec(&[4.0])).unwrap();
        let norm = clip_global_norm(&mut store, 1.0).unwrap();
        assert!((norm - 5.0).abs() < 1e-12);
        let clipped: f64 = store
            .iter()
            .flat_map(|(_, p)| p.grad.data().iter().map(|g| g * g))
            .sum::<f64>()
            .sqrt();
        assert!((clipped - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_is_reported_with_parameter_name() {
        let mut store = ParameterStore::new();
        store.register("dec.head.w", Tensor::scalar(1.0)).unwrap();
        store.accumulate_grad("dec.head.w", &Tensor::scalar(f64::NAN)).unwrap();
        let err = adam_step(&mut store, &mut AdamState::new(), &cfg(0.1)).unwrap_err();
        match err {
            Error::Training(msg) => assert!(msg.contains("dec.head.w"), "{msg}"),
            other => panic!("unexpected error {other}"),
        }
    }
}
