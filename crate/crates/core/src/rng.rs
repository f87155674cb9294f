//! Counter-based randomness.
//!
//! Every random draw in a forward pass or rollout is a pure function of a
//! `(seed, stream, counter)` triple, so sequences can be generated in any
//! order (or in parallel) and still reproduce bit-for-bit.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64 well-mixed bits keyed by three words.
#[inline]
pub fn hash3(seed: u64, stream: u64, counter: u64) -> u64 {
    let a = mix(seed.wrapping_add(GOLDEN));
    let b = mix(a ^ stream.wrapping_mul(GOLDEN).wrapping_add(0x632B_E59B_D9B4_E019));
    mix(b ^ counter.wrapping_mul(0xD6E8_FEB8_6659_FD93).wrapping_add(GOLDEN))
}

/// Uniform draw in `[0, 1)` with 53 bits of resolution.
#[inline]
pub fn uniform(seed: u64, stream: u64, counter: u64) -> f64 {
    (hash3(seed, stream, counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform draw in `[-delta, delta]`.
#[inline]
pub fn symmetric(seed: u64, stream: u64, counter: u64, delta: f64) -> f64 {
    (2.0 * uniform(seed, stream, counter) - 1.0) * delta
}
