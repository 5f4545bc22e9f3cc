//! Seed derivation and the crate-wide random generator.
//!
//! All sampling goes through ChaCha8, which is specified, seedable, and
//! produces identical streams on every platform. Independent streams are
//! derived from a base seed and a list of string tags by FNV-1a hashing
//! followed by a SplitMix64 finalizer, so consumers never contend for
//! positions in a shared stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives a child seed from `base` and an ordered list of tags.
pub fn derive_seed(base: u64, tags: &[&str]) -> u64 {
    let mut h = base ^ 0xcbf2_9ce4_8422_2325;
    for tag in tags {
        for byte in tag.as_bytes() {
            h ^= u64::from(*byte);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        h = splitmix64(h);
    }
    splitmix64(h)
}

/// A ChaCha8 generator seeded from [`derive_seed`].
pub fn rng_for(base: u64, tags: &[&str]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derivation_is_deterministic_and_tag_sensitive() {
        assert_eq!(derive_seed(7, &["a", "b"]), derive_seed(7, &["a", "b"]));
        assert_ne!(derive_seed(7, &["a", "b"]), derive_seed(7, &["b", "a"]));
        assert_ne!(derive_seed(7, &["ab"]), derive_seed(7, &["a", "b"]));
        assert_ne!(derive_seed(7, &["a"]), derive_seed(8, &["a"]));
    }

    #[test]
    fn streams_reproduce() {
        let a: Vec<f64> = rng_for(42, &["x"]).sample_iter(rand::distr::StandardUniform).take(8).collect();
        let b: Vec<f64> = rng_for(42, &["x"]).sample_iter(rand::distr::StandardUniform).take(8).collect();
        assert_eq!(a, b);
    }
}
