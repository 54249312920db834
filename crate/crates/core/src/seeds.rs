//! Deterministic seed derivation for independent RNG streams.

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive the `stream`-th child seed of a master seed. Children are
/// independent of each other and stable across runs.
pub(crate) fn derive(master: u64, stream: u64) -> u64 {
    splitmix64(master ^ splitmix64(stream ^ 0xA076_1D64_78BD_642F))
}
