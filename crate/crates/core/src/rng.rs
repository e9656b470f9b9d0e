//! Seeded, platform-independent random streams.
//!
//! Every consumer draws from its own ChaCha stream so that adding or removing
//! one component (for example the text projector) never shifts the random
//! numbers seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Stream {
    Mask = 1,
    BaseInit = 2,
    ProjectorInit = 3,
    BatchOrder = 4,
    BaseDropout = 5,
    ProjectorDropout = 6,
    Shuffle = 7,
    Synthetic = 8,
    Noise = 9,
}

pub(crate) fn seeded(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
