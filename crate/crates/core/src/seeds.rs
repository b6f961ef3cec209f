//! Independent, reproducible RNG streams derived from one base seed.
//!
//! Each consumer (tuple sampling, noise, Fisher estimation, re-inits, ...)
//! derives its own seed, so adding or removing one consumer never perturbs
//! the streams of the others.

/// Mix a base seed with stream tags via splitmix64 finalisation.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    for &t in tags {
        h ^= t.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}
