//! Small internal helpers.

/// FNV-1a 64-bit hash. Used for config fingerprints; stable across runs
/// and platforms, no dependency needed.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    hash
}

/// Total order on f64 pairs for deterministic tie-breaking.
pub fn cmp_f64(a: f64, b: f64) -> std::cmp::Ordering {
    a.total_cmp(&b)
}
