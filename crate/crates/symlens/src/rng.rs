//! Seed derivation and deterministic random streams.
//!
//! Every stochastic component (parameter init, initial conditions, epoch
//! shuffles) draws from a ChaCha8 stream seeded by mixing a base seed with a
//! stream label, so independent components never share a stream and reruns
//! are bit-identical.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; used only to spread seed/label bits.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive an independent sub-seed from `(seed, label)`.
pub fn derive(seed: u64, label: u64) -> u64 {
    mix(mix(seed) ^ label.wrapping_mul(0xd1342543de82ef95))
}

/// Deterministic stream for `(seed, label)`.
pub fn stream(seed: u64, label: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, label))
}

/// Stream labels for the toolkit's independent random consumers.
pub mod labels {
    pub const PARAM_INIT: u64 = 1;
    pub const IC_RHO: u64 = 2;
    pub const IC_VX: u64 = 3;
    pub const IC_VY: u64 = 4;
    pub const SHUFFLE: u64 = 5;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_reproducible_and_distinct() {
        let a: f64 = stream(7, 1).gen();
        let b: f64 = stream(7, 1).gen();
        let c: f64 = stream(7, 2).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
