//! Seeded random streams. Every consumer of randomness gets its own stream
//! so that changing one consumer never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent streams derived from one experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Matrix,
    EnvChange(usize),
    Requesters,
    Traffic,
    Learning(usize),
    Signal(usize),
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Matrix => 1,
            Stream::Requesters => 2,
            Stream::Traffic => 3,
            Stream::EnvChange(i) => (1 << 16) + i as u64,
            Stream::Learning(sn) => (2 << 16) + sn as u64,
            Stream::Signal(sn) => (3 << 16) + sn as u64,
        }
    }
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// 64-bit seed for consumers that take a seed rather than an RNG.
pub fn derive_seed(seed: u64, stream: Stream) -> u64 {
    splitmix64(splitmix64(seed) ^ stream.id())
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
