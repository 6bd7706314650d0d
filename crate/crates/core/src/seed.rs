//! Derived random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Consumer of a random stream; each gets its own sub-seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Split,
    Init,
    Shuffle,
    Dropout,
    Synth,
}

impl Role {
    fn tag(self) -> u64 {
        match self {
            Role::Split => 0x5b1e_3c0d_a7f4_0001,
            Role::Init => 0x1a17_9e2b_44c3_0002,
            Role::Shuffle => 0x3d6f_81a5_0bb2_0003,
            Role::Dropout => 0x7c28_d913_6e0f_0004,
            Role::Synth => 0x2e95_47b0_c1d8_0005,
        }
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// `splitmix64(base ^ role ^ index)`.
pub fn derive_seed(base: u64, role: Role, index: u64) -> u64 {
    splitmix64(base ^ role.tag() ^ index)
}

pub fn stream(base: u64, role: Role, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, role, index))
}
