//! Seed derivation and the RNG used across the pipeline.
//!
//! Every randomized stage takes a `u64` seed and derives per-unit seeds
//! (per tree, per repeat, per sample) through [`derive_seed`], so any unit
//! of work is re-runnable in isolation and results never depend on thread
//! scheduling. ChaCha8 is used because its `seed_from_u64` stream is stable
//! across platforms and releases.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The pipeline's RNG type.
pub type PipelineRng = ChaCha8Rng;

/// Derive an independent child seed from `master` and a stream id.
///
/// splitmix64 finalizer over the pair; distinct `(master, stream)` inputs
/// give well-separated streams.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Build the pipeline RNG from a seed.
pub fn make_rng(seed: u64) -> PipelineRng {
    ChaCha8Rng::seed_from_u64(seed)
}
