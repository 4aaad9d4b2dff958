//! Seeded random streams.
//!
//! All randomness derives from one experiment seed. Each stage draws from
//! its own ChaCha stream so that changing how much one stage consumes does
//! not perturb the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Fleet,
    Selection,
    Data,
    Partition,
    Training,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Fleet => 1,
            Stream::Selection => 2,
            Stream::Data => 3,
            Stream::Partition => 4,
            Stream::Training => 5,
        }
    }
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// A stream further keyed by a sub-index, e.g. one per (round, client).
pub fn keyed_rng(seed: u64, stream: Stream, key: u64) -> ChaCha8Rng {
    // splitmix64 finaliser so nearby keys give unrelated seeds
    let mut z = seed ^ key.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    let mut rng = ChaCha8Rng::seed_from_u64(z);
    rng.set_stream(stream.id());
    rng
}
