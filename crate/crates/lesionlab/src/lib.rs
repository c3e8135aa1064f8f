//! A desk-scale laboratory for multi-task learning on synthetic chest-CT-like
//! phantoms. One shared convolutional encoder feeds four task heads
//! (classification, segmentation, reconstruction, detection); training runs in
//! stages that transfer encoder weights from one task combination to the next.
//!
//! Everything is deterministic: fixed seeds produce byte-identical datasets,
//! checkpoints, and training curves. All computation is f64 on the CPU;
//! checkpoints store f32, which round-trips exactly.

pub mod datakit;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod trainer;

pub mod cli;

/// Derives an independent sub-seed from a root seed, a purpose tag, and an
/// index. Distinct (tag, index) pairs give statistically independent streams,
/// so consumers never share or race on one generator.
pub fn derive_seed(root: u64, tag: &str, index: u64) -> u64 {
    // FNV-1a over the tag, then two rounds of splitmix64 finalization.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = root ^ h.rotate_left(17) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for _ in 0..2 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}
