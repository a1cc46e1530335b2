//! Seeded RNG and weight initialization helpers.
//!
//! ChaCha20 keeps the stream identical across platforms, which the
//! determinism guarantees (bit-identical init, metrics, checkpoints) rely on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::tensor::Tensor;

/// Deterministic RNG with a serializable position (seed + word offset).
#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: ChaCha20Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            inner: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.gen_range(lo..hi)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Stream position for checkpointing; pair with the original seed.
    pub fn word_pos(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn set_word_pos(&mut self, pos: u128) {
        self.inner.set_word_pos(pos);
    }

    pub fn seed(&self) -> [u8; 32] {
        self.inner.get_seed()
    }

    pub fn from_state(seed: [u8; 32], word_pos: u128) -> Self {
        let mut inner = ChaCha20Rng::from_seed(seed);
        inner.set_word_pos(word_pos);
        SeededRng { inner }
    }
}

/// Xavier-uniform init: U(-a, a) with a = gain * sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform(rng: &mut SeededRng, rows: usize, cols: usize, gain: f64) -> Tensor {
    let bound = gain * (6.0 / (rows + cols) as f64).sqrt();
    let values = (0..rows * cols)
        .map(|_| rng.uniform(-bound, bound))
        .collect();
    Tensor::new(vec![rows, cols], values).expect("xavier shape is valid")
}
