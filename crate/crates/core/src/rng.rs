//! Counter-based random streams.
//!
//! A stream is addressed by `(master seed, domain, index, node)`. The master
//! seed and domain select a ChaCha8 key, the index selects the ChaCha stream
//! and the node selects a fixed-size window of the keystream. Any draw can be
//! regenerated without replaying earlier draws, so results do not depend on
//! scheduling or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 32-bit keystream words reserved per grid node. Node draws use a handful of
/// words; overflowing a window only makes neighbouring windows overlap.
pub const WORDS_PER_NODE: u128 = 256;

/// Independent stream families derived from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Domain {
    Subordinator = 1,
    Brownian = 2,
    InitialLaw = 3,
    Subsample = 4,
    Probe = 5,
    Calibration = 6,
    Verification = 7,
    Auxiliary = 8,
}

/// ChaCha8 key for one `(master seed, domain)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngKey {
    key: [u8; 32],
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngKey {
    pub fn new(master_seed: u64, domain: Domain) -> Self {
        Self::from_parts(master_seed, domain as u64, 0)
    }

    /// Key for a numbered sub-experiment (e.g. one time point of a sweep).
    pub fn child(&self, tag: u64) -> Self {
        let mut s = 0u64;
        for chunk in self.key.chunks(8) {
            s ^= u64::from_le_bytes(chunk.try_into().unwrap());
            splitmix64(&mut s);
        }
        Self::from_parts(s, 0xC41D, tag)
    }

    fn from_parts(seed: u64, domain: u64, tag: u64) -> Self {
        let mut state = seed ^ domain.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ tag.rotate_left(29);
        let mut key = [0u8; 32];
        for chunk in key.chunks_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        Self { key }
    }

    /// Generator positioned at the start of stream `index`.
    pub fn stream(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(index);
        rng
    }

    /// Generator positioned at the window of `node` in stream `index`.
    pub fn at(&self, index: u64, node: u64) -> ChaCha8Rng {
        let mut rng = self.stream(index);
        seek_node(&mut rng, node);
        rng
    }
}

/// Moves `rng` to the start of the window reserved for `node`.
pub fn seek_node(rng: &mut ChaCha8Rng, node: u64) {
    rng.set_word_pos(node as u128 * WORDS_PER_NODE);
}
