//! Named random sub-streams derived from a single root seed.
//!
//! Every consumer of randomness asks for its own stream by tag plus a list
//! of indices (round, client, cluster, ...). Streams never share state, so
//! the order in which work items run has no effect on the numbers they see.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit key for `(root, tag, indices)`.
pub fn stream_key(root: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in tag.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    let mut key = splitmix64(root ^ splitmix64(h));
    for &i in indices {
        key = splitmix64(key ^ splitmix64(i.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    key
}

pub fn substream(root: u64, tag: &str, indices: &[u64]) -> StreamRng {
    ChaCha8Rng::seed_from_u64(stream_key(root, tag, indices))
}
