//! Deterministic seed derivation.
//!
//! Every random draw in a simulation comes from its own ChaCha stream whose
//! seed is a stable hash of the coordinates that identify it (master seed,
//! run, purpose, expert, instance). Results therefore do not depend on the
//! order in which runs or instances are evaluated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random generator used throughout the crate.
pub type StreamRng = ChaCha8Rng;

/// Purpose tags keep streams for different draws independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Run = 1,
    Split = 2,
    Jitter = 3,
    Initial = 4,
    Final = 5,
    Subset = 6,
    Synthetic = 7,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit hash of a sequence of words.
pub fn mix(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243F_6A88_85A3_08D3, |acc, &p| {
        splitmix64(acc ^ splitmix64(p))
    })
}

/// Seed of run `run` under `master_seed`.
pub fn run_seed(master_seed: u64, run: u64) -> u64 {
    mix(&[master_seed, Purpose::Run as u64, run])
}

/// Generator for a purpose-tagged stream below `seed`.
pub fn stream(seed: u64, purpose: Purpose, coords: &[u64]) -> StreamRng {
    let mut parts = Vec::with_capacity(coords.len() + 2);
    parts.push(seed);
    parts.push(purpose as u64);
    parts.extend_from_slice(coords);
    StreamRng::seed_from_u64(mix(&parts))
}
