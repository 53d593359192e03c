//! Teacher-forced cross-entropy over a decoded sequence.

use crate::error::Result;
use crate::numerics::{NodeId, Tape, Tensor};

/// -sum_t log p_t[target_t] over non-pad positions, as a 1x1 node.
///
/// Picked probabilities are clamped below at 1e-12 before the log, so a
/// confidently wrong model yields a large but finite loss. An all-pad
/// target contributes a constant zero.
pub fn sequence_cross_entropy(
    tape: &mut Tape,
    probs: &[NodeId],
    targets: &[u32],
    pad_id: u32,
) -> Result<NodeId> {
    debug_assert_eq!(probs.len(), targets.len());
    let mut picked = Vec::with_capacity(targets.len());
    for (&p, &target) in probs.iter().zip(targets.iter()) {
        if target == pad_id {
            continue;
        }
        let prob = tape.pick(p, 0, target as usize)?;
        picked.push(tape.log_clamped(prob));
    }
    if picked.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let total = tape.add_all(&picked)?;
    Ok(tape.scale(total, -1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::PAD_ID;

    fn one_hot(tape: &mut Tape, size: usize, hot: usize) -> NodeId {
        let mut row = vec![0.0; size];
        row[hot] = 1.0;
        tape.constant(Tensor::row_vec(&row))
    }

    #[test]
    fn perfect_predictions_give_zero_loss() {
        let mut tape = Tape::new();
        let probs = vec![one_hot(&mut tape, 5, 2), one_hot(&mut tape, 5, 4)];
        let loss = sequence_cross_entropy(&mut tape, &probs, &[2, 4], PAD_ID).unwrap();
        assert_eq!(tape.scalar_value(loss), 0.0);
    }

    #[test]
    fn uniform_predictions_give_t_ln_v() {
        let mut tape = Tape::new();
        let v = 8usize;
        let uniform: Vec<NodeId> = (0..3)
            .map(|_| tape.constant(Tensor::filled(1, v, 1.0 / v as f64)))
            .collect();
        let loss = sequence_cross_entropy(&mut tape, &uniform, &[1, 5, 7], PAD_ID).unwrap();
        let expected = 3.0 * (v as f64).ln();
        assert!((tape.scalar_value(loss) - expected).abs() < 1e-12);
    }

    #[test]
    fn pad_positions_contribute_nothing() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::filled(1, 4, 0.25));
        let mixed = sequence_cross_entropy(&mut tape, &[p, p], &[PAD_ID, 3], PAD_ID).unwrap();
        let expected = (4.0_f64).ln();
        assert!((tape.scalar_value(mixed) - expected).abs() < 1e-12);

        let all_pad = sequence_cross_entropy(&mut tape, &[p, p], &[PAD_ID, PAD_ID], PAD_ID).unwrap();
        assert_eq!(tape.scalar_value(all_pad), 0.0);
    }

    #[test]
    fn zero_probability_is_clamped_not_infinite() {
        let mut tape = Tape::new();
        let p = one_hot(&mut tape, 3, 0);
        let loss = sequence_cross_entropy(&mut tape, &[p], &[2], PAD_ID).unwrap();
        let v = tape.scalar_value(loss);
        assert!(v.is_finite());
        assert!((v - (-(1e-12_f64).ln())).abs() < 1e-6);
    }
}
