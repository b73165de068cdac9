//! Object contents are modeled as 64-bit digests instead of real bytes.

/// A 64-bit content digest.
pub type ContentHash = u64;

/// splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Order-dependent combination of two digests.
pub fn combine(acc: ContentHash, value: u64) -> ContentHash {
    mix64(acc.rotate_left(17) ^ mix64(value))
}

/// Digest of a sequence of words.
pub fn digest(words: &[u64]) -> ContentHash {
    words.iter().fold(0xcbf2_9ce4_8422_2325, |acc, &w| combine(acc, w))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_order_sensitive() {
        assert_ne!(digest(&[1, 2]), digest(&[2, 1]));
        assert_eq!(digest(&[1, 2, 3]), digest(&[1, 2, 3]));
    }
}
