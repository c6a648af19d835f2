//! Seed derivation so every stage draws from one global seed.
//!
//! Stages and per-image work derive independent streams via a stable hash of
//! (global seed, stage name, item id). Reruns of any single stage therefore
//! reproduce its randomness without replaying the stages before it.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the seed, stage tag and item id. Stable across platforms.
pub fn derive_seed(global_seed: u64, stage: &str, id: u64) -> u64 {
    const OFFSET: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x100000001b3;
    let mut h = OFFSET;
    for b in global_seed
        .to_le_bytes()
        .iter()
        .chain(stage.as_bytes())
        .chain(id.to_le_bytes().iter())
    {
        h ^= *b as u64;
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// RNG for a (stage, item) pair under the global seed.
pub fn stage_rng(global_seed: u64, stage: &str, id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(global_seed, stage, id))
}
