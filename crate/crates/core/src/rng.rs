//! Counter-based random streams keyed by (master seed, replica, stream id).
//!
//! ChaCha20 is a keyed counter-mode generator: the key comes from the master
//! seed and the 64-bit stream selector packs the replica index and stream id,
//! so every replica can be regenerated independently and in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Stream ids used by the pipelines.
pub mod streams {
    pub const GAUSSIAN_FIELD: u16 = 1;
    pub const SYNTHETIC: u16 = 2;
    /// Level `l` of a multi-grid experiment draws from stream `LEVEL_BASE + l`.
    pub const LEVEL_BASE: u16 = 16;
}

pub fn stream_rng(master_seed: u64, replica: u64, stream: u16) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&master_seed.to_le_bytes());
    key[8..16].copy_from_slice(&(!master_seed).rotate_left(17).to_le_bytes());
    let mut rng = ChaCha20Rng::from_seed(key);
    assert!(replica < 1 << 48, "replica index out of range");
    rng.set_stream((replica << 16) | stream as u64);
    rng
}
