//! Seed derivation for independent, reproducible random streams.

/// SplitMix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and a path of stream identifiers.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix64(base), |acc, &p| mix64(acc ^ mix64(p)))
}

/// Stable 64-bit hash of a string, for folding identifiers into seeds.
pub fn hash_str(s: &str) -> u64 {
    // FNV-1a
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}
