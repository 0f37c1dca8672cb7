//! Seeded inputs shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mgve_core::{Chunk, ModelConfig, Tensor, TokenSequence};

pub fn random_chunk(cfg: &ModelConfig, height: usize, width: usize, seed: u64) -> Chunk {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Chunk {
        frames: Tensor::uniform([cfg.frames_per_chunk, height, width, 3], 0.0, 1.0, &mut rng),
        chunk_id: 0,
        first_timestamp: 0.0,
    }
}

/// `chunks` chunks of `per_chunk` Gaussian tokens of width `dim`.
pub fn random_sequence(chunks: usize, per_chunk: usize, dim: usize, seed: u64) -> TokenSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = (0..chunks)
        .flat_map(|c| std::iter::repeat_n(c, per_chunk))
        .collect();
    TokenSequence::new(Tensor::randn([chunks * per_chunk, dim], 1.0, &mut rng), ids)
        .expect("consistent shapes")
}
