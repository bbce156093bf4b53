//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! whose seed is derived from one user seed plus a stream label, so runs are
//! reproducible and streams never alias.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a stream label.
pub fn derive(seed: u64, stream: u64) -> u64 {
    mix64(seed ^ mix64(stream))
}

/// Stable hash of a token sequence under a seed; used where a random choice
/// must depend on content rather than position in a corpus.
pub fn hash_tokens(seed: u64, ids: &[u32]) -> u64 {
    ids.iter()
        .fold(mix64(seed ^ ids.len() as u64), |h, &id| mix64(h ^ u64::from(id)))
}

pub fn stream(seed: u64, stream: u64) -> Rng {
    Rng::seed_from_u64(derive(seed, stream))
}

/// Stream labels.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const MASK: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const VALIDATION: u64 = 5;
    pub const CM_SPANS: u64 = 6;
    pub const DECODE: u64 = 7;
    pub const ORDER: u64 = 8;
    pub const TASKS: u64 = 9;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_distinct_and_repeatable() {
        let a: u64 = stream(7, streams::DATA).random();
        let b: u64 = stream(7, streams::MASK).random();
        let c: u64 = stream(7, streams::DATA).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn token_hash_depends_on_content_only() {
        assert_eq!(hash_tokens(1, &[4, 5, 6]), hash_tokens(1, &[4, 5, 6]));
        assert_ne!(hash_tokens(1, &[4, 5, 6]), hash_tokens(1, &[4, 6, 5]));
        assert_ne!(hash_tokens(1, &[4, 5, 6]), hash_tokens(2, &[4, 5, 6]));
    }
}
