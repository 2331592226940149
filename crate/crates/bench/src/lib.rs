//! Shared fixtures for the criterion benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spt_core::{KeepMask, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform `[-1, 1)` entries.
pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Keeps each token independently with probability `ratio`.
pub fn random_keep(batch: usize, h: usize, w: usize, ratio: f64, rng: &mut impl Rng) -> KeepMask {
    let keep = (0..batch * h * w).map(|_| rng.gen_bool(ratio)).collect();
    KeepMask::new(batch, h, w, keep).expect("mask size matches grid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_have_requested_shapes() {
        let mut r = rng(0);
        assert_eq!(random_tensor(&[2, 3], &mut r).shape(), [2, 3]);
        let k = random_keep(2, 4, 4, 0.5, &mut r);
        assert_eq!(k.tokens_per_image(), 16);
        assert_eq!(random_keep(1, 4, 4, 1.0, &mut r).count(), 16);
    }
}
