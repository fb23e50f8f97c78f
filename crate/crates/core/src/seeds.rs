//! Deterministic sub-seed derivation so every random draw is keyed by the
//! master seed plus a purpose tag, never by shared RNG state.

/// SplitMix64 finalizer applied to `base` mixed with `tag`.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for a `(scope, index)` pair, e.g. `(EPOCH, 3)`.
pub fn child_seed(base: u64, scope: u64, index: u64) -> u64 {
    derive_seed(derive_seed(base, scope), index)
}
