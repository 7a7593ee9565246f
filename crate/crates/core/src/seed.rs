//! Derivation of independent per-stream seeds from one master seed.

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for the stream named `tag` under `master`.
pub fn derive(master: u64, tag: &str) -> u64 {
    tag.bytes().fold(mix(master), |h, b| mix(h ^ u64::from(b)))
}

/// Seed for the `index`-th member of stream `tag`.
pub fn derive_indexed(master: u64, tag: &str, index: u64) -> u64 {
    mix(derive(master, tag) ^ mix(index))
}
