use rand::Rng;

use super::FramePair;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// `count` ordered index pairs `(i, j)`, `i ≠ j`, drawn uniformly from a
/// sequence of length `len`.
pub fn sample_pair_indices<R: Rng + ?Sized>(len: usize, count: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    if len < 2 {
        return Err(Error::usage(format!("self-supervised sampling needs at least 2 frames, got {len}")));
    }
    Ok((0..count)
        .map(|_| {
            let i = rng.random_range(0..len);
            let j = rng.random_range(0..len - 1);
            (i, if j >= i { j + 1 } else { j })
        })
        .collect())
}

/// Unlabelled pairs from one frame sequence; only the displacement loss
/// applies to them.
pub fn sample_self_supervised_pairs<T: Real, R: Rng + ?Sized>(
    sequence: &[Tensor<T>],
    subject_id: &str,
    count: usize,
    rng: &mut R,
) -> Result<Vec<FramePair<T>>> {
    sample_pair_indices(sequence.len(), count, rng)?
        .into_iter()
        .map(|(i, j)| FramePair::new(sequence[i].clone(), sequence[j].clone(), subject_id, None))
        .collect()
}
