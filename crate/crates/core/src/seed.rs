//! Sub-seed derivation.
//!
//! Every random stream is seeded with `sub_seed(seed, counter)`, where
//! `counter` names the consumer (see the constants) and is offset by a step
//! or batch index where one consumer needs many streams. The mix is one
//! SplitMix64 round over `seed + (counter + 1)·γ`.

pub const MODEL_INIT: u64 = 0;
pub const HEAD_INIT: u64 = 1;
pub const DATA_SPLIT: u64 = 2;
pub const SHUFFLE: u64 = 3;
/// Pretraining batches use `PRETRAIN_BATCH + step`.
pub const PRETRAIN_BATCH: u64 = 1 << 32;

const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

pub fn sub_seed(seed: u64, counter: u64) -> u64 {
    let mut z = seed.wrapping_add(counter.wrapping_add(1).wrapping_mul(GAMMA));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
