//! Seed splitting. Every derived stream is a pure function of the root seed and
//! a small tuple of labels, so any row of any experiment can be replayed alone.
//!
//! `derive(root, labels)` folds each label into the state with one SplitMix64
//! step: `s = splitmix64(s ^ splitmix64(label))`, starting from `s = root`.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(root: u64, labels: &[u64]) -> u64 {
    labels.iter().fold(root, |s, &l| splitmix64(s ^ splitmix64(l)))
}

/// Label namespaces so different consumers of one root never collide.
pub mod stream {
    pub const SWEEP_REP: u64 = 1;
    pub const FIT_RESTART: u64 = 2;
    pub const BAYOPT: u64 = 3;
    pub const MEASURE: u64 = 4;
    pub const TRACE: u64 = 5;
    pub const SUBSAMPLE: u64 = 6;
}
