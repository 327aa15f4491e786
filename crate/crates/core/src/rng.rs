//! Named random sub-streams derived from a single run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Consumers of randomness; each gets its own ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Simulate,
    Noise,
    Init,
    Train,
    Densify,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Simulate => 1,
            Stream::Noise => 2,
            Stream::Init => 3,
            Stream::Train => 4,
            Stream::Densify => 5,
        }
    }
}

/// Generator for `(seed, stream, index)`; `index` separates e.g. per-view streams.
pub fn named_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream.id() << 48) ^ index);
    rng
}
