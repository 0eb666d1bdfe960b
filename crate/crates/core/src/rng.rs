//! Deterministic seeding.
//!
//! Every stochastic routine takes an explicit `u64` seed and derives
//! independent substreams from it. Within one simulation each path gets its
//! own ChaCha8 stream (`set_stream(path_index)`), so results are
//! byte-identical regardless of how paths are scheduled across worker
//! threads. Distinct purposes (outer ensemble, nested revaluations, bump
//! sides, ...) are separated by mixing a tag and an index into the seed with
//! a SplitMix64-style finalizer.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seed-mixing tags for the derived substreams used across the crate.
pub mod tag {
    /// Outer (unconditional) ensemble simulation.
    pub const OUTER: u64 = 0x4f55_5445;
    /// Conditional revaluation inside state-derivative estimates.
    pub const DX_INNER: u64 = 0x4458_494e;
    /// Conditional revaluation inside curve-derivative estimates.
    pub const GATEAUX_INNER: u64 = 0x4754_584e;
    /// Conditional pricing (tower checks, CLI price at t > 0).
    pub const PRICE_INNER: u64 = 0x5052_494e;
    /// Outer state sampling for identity verification.
    pub const IDENTITY_OUTER: u64 = 0x4944_4f55;
    /// Left-side (loading regression) ensemble of an identity check.
    pub const IDENTITY_LHS: u64 = 0x4944_4c48;
    /// Price-derivative estimate feeding the left side.
    pub const IDENTITY_LHS_DX: u64 = 0x4944_4c44;
    /// Right-side (pathwise derivative) ensemble of an identity check.
    pub const IDENTITY_RHS: u64 = 0x4944_5248;
    /// Price-derivative estimate feeding the right side.
    pub const IDENTITY_RHS_DX: u64 = 0x4944_5244;
    /// Ensemble of a martingale-residual verification run.
    pub const MARTINGALE: u64 = 0x4d41_5254;
}

/// Mix `(seed, tag, index)` into a new seed (SplitMix64 finalizer; the odd
/// constants are the standard Stafford mix-13 multipliers).
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// RNG for one path of one simulation: the simulation seed keys the cipher,
/// the path index selects the stream.
pub fn path_rng(sim_seed: u64, path_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(sim_seed);
    rng.set_stream(path_index);
    rng
}
