//! Small shared helpers.

/// SplitMix64 finalizer; used to derive independent deterministic streams.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// C(n, 2).
pub fn pairs_of(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

pub fn secs_to_ns(s: f64) -> u64 {
    (s * 1e9).round().max(0.0) as u64
}
