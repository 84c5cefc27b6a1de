//! Deterministic RNG substreams.
//!
//! Every stochastic filter in this crate draws from ChaCha8 streams derived
//! from a single run seed. Each (step, lane) pair gets an independent stream,
//! so adding draws to one lane (say, mutation) never shifts the draws seen by
//! another (propagation, resampling, ...). That keeps reduced configurations
//! exactly reproducible: a mutated particle filter with zero mutation
//! probability consumes the same propagation and resampling randomness as the
//! plain bootstrap filter and therefore produces bit-identical output.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Randomness lanes, one per distinct purpose inside a filter step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lane {
    /// Drawing the initial ensemble or mixture.
    Init,
    /// Process-noise draws during propagation.
    Propagate,
    /// Resampling offsets / categorical draws.
    Resample,
    /// Prior-replacement coin flips.
    Replace,
    /// Creep-mutation coin flips and magnitudes.
    Mutate,
    /// Sampling from filter proposals (sigma-point and mixture filters).
    Proposal,
    /// Synthetic-data generation (simulator force and measurement noise).
    Simulate,
}

impl Lane {
    fn id(self) -> u64 {
        match self {
            Lane::Init => 1,
            Lane::Propagate => 2,
            Lane::Resample => 3,
            Lane::Replace => 4,
            Lane::Mutate => 5,
            Lane::Proposal => 6,
            Lane::Simulate => 7,
        }
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive the ChaCha stream for `(seed, step, lane)`.
///
/// The 256-bit key is expanded from the three inputs with splitmix64, so
/// distinct tuples map to independent streams.
pub fn substream(seed: u64, step: u64, lane: Lane) -> ChaCha8Rng {
    let mut state = seed ^ 0x6A09_E667_F3BC_C908;
    let mut key = [0u8; 32];
    let a = splitmix64(&mut state);
    state ^= step.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    let b = splitmix64(&mut state);
    state ^= lane.id().wrapping_mul(0xA076_1D64_78BD_642F);
    let c = splitmix64(&mut state);
    let d = splitmix64(&mut state);
    key[0..8].copy_from_slice(&a.to_le_bytes());
    key[8..16].copy_from_slice(&b.to_le_bytes());
    key[16..24].copy_from_slice(&c.to_le_bytes());
    key[24..32].copy_from_slice(&d.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
