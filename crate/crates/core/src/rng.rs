//! Deterministic random-number streams.
//!
//! Every random draw in the crate comes from a stream addressed by content:
//! a master seed plus a purpose tag and index words (trajectory, time step,
//! bootstrap replicate, ...). Two streams with distinct addresses are
//! independent ChaCha12 instances; the same address always replays the same
//! draws. This is what makes simulation results independent of worker count
//! and lets a perturbed re-simulation share or avoid the nominal run's
//! randomness by construction.

use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};

/// Purpose tags keep streams for different subsystems disjoint even when
/// their index words collide.
pub mod purpose {
    /// Kernel transition draws: words are (slot, time).
    pub const KERNEL: u64 = 0x4b45524e;
    /// Perturbation effect draws: words are (slot, time).
    pub const EFFECT: u64 = 0x45464643;
    /// Bootstrap resampling: word is the replicate index.
    pub const BOOTSTRAP: u64 = 0x424f4f54;
    /// Derivation of a perturbed-suffix seed: words are (fingerprint, tau).
    pub const SUFFIX: u64 = 0x53554646;
}

#[inline]
fn mix(mut z: u64) -> u64 {
    // SplitMix64 finalizer.
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// Collapse a master seed and address words into a single 64-bit seed.
pub fn derive_seed(master: u64, words: &[u64]) -> u64 {
    let mut s = mix(master ^ GOLDEN);
    for &w in words {
        s = mix(s.wrapping_add(GOLDEN) ^ mix(w));
    }
    s
}

/// Open the stream addressed by `(master, words)`.
pub fn stream(master: u64, words: &[u64]) -> ChaCha12Rng {
    let s = derive_seed(master, words);
    let mut key = [0u8; 32];
    for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
        chunk.copy_from_slice(&mix(s.wrapping_add((i as u64 + 1).wrapping_mul(GOLDEN))).to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}

/// Uniform draw in [0, 1) with 53 bits of precision.
#[inline]
pub fn unit_f64<R: RngCore>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
}

/// Uniform draw in [lo, hi].
#[inline]
pub fn uniform<R: RngCore>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + unit_f64(rng) * (hi - lo)
}

/// Uniform index in [0, n) via widening multiply.
#[inline]
pub fn index<R: RngCore>(rng: &mut R, n: usize) -> usize {
    debug_assert!(n > 0);
    ((rng.next_u64() as u128 * n as u128) >> 64) as usize
}
