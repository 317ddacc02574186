use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::Tensor;

/// Deterministic seeded parameter initialization.
pub struct ParamInit {
    rng: ChaCha12Rng,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha12Rng::seed_from_u64(seed) }
    }

    /// Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
    pub fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        Tensor::new(shape, data)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Tensor {
        Tensor::zeros(shape)
    }

    pub fn ones(&mut self, shape: &[usize]) -> Tensor {
        Tensor::filled(shape, 1.0)
    }
}
