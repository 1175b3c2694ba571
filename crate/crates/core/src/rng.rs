//! Named random sub-streams derived from a single run seed.
//!
//! Every consumer of randomness draws from its own ChaCha stream so that,
//! for example, changing the number of Monte-Carlo samples never perturbs
//! data generation or weight initialisation.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub type RunRng = ChaCha20Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Sampling = 3,
    Shuffle = 4,
    Eval = 5,
}

pub fn stream(seed: u64, which: Stream) -> RunRng {
    substream(seed, which, 0)
}

/// Independent child stream `index` of a named stream.
pub fn substream(seed: u64, which: Stream, index: u32) -> RunRng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(((which as u64) << 32) | u64::from(index));
    rng
}
