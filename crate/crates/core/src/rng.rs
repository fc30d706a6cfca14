//! Keyed random streams.
//!
//! Every random draw in the pipeline comes from a ChaCha stream addressed by
//! a root seed plus a key path such as `(step, image, view, purpose)`. Streams
//! never share state, so results do not depend on evaluation order, and the
//! whole training RNG state reduces to the root seed and the step counter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purpose tags so that the same `(step, image, view)` key yields
/// independent streams for augmentation, noise and masking.
pub mod tag {
    pub const SHUFFLE: u64 = 0x5348_5546;
    pub const AUGMENT: u64 = 0x4155_4745;
    pub const NOISE: u64 = 0x4e4f_4953;
    pub const MASK: u64 = 0x4d41_534b;
    pub const INIT: u64 = 0x494e_4954;
    pub const DATA: u64 = 0x4441_5441;
    pub const PROBE: u64 = 0x5052_4f42;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Opens the stream addressed by `seed` and `keys`.
pub fn stream(seed: u64, keys: &[u64]) -> StreamRng {
    let mut h = seed ^ 0x243f_6a88_85a3_08d3;
    for &k in keys {
        h = splitmix64(&mut h) ^ k;
    }
    let mut bytes = [0u8; 32];
    for chunk in bytes.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut h).to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}
