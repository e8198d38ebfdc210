//! Counter-based random streams.
//!
//! Every draw is a pure function of `(key, counter)`, so results do not
//! depend on iteration order or on how work is split between threads.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// One round of the SplitMix64 output function.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream key from a parent key and a tag.
#[inline]
pub fn derive(key: u64, tag: u64) -> u64 {
    splitmix64(key ^ splitmix64(tag.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// Uniform in `[0, 1)` at position `counter` of stream `key`.
#[inline]
pub fn uniform_at(key: u64, counter: u64) -> f64 {
    let bits = splitmix64(key.wrapping_add(counter.wrapping_mul(GOLDEN)));
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal at position `counter` of stream `key` (Box–Muller).
#[inline]
pub fn normal_at(key: u64, counter: u64) -> f64 {
    let u1 = 1.0 - uniform_at(key, 2 * counter);
    let u2 = uniform_at(key, 2 * counter + 1);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
