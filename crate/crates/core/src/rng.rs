//! Purpose-separated random streams derived from one root seed.
//!
//! Every consumer of randomness draws from its own ChaCha stream so that,
//! for instance, toggling shake regularization does not shift the dropout
//! masks or the mini-batch order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type RandomStream = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Init = 1,
    DataOrder = 2,
    Dropout = 3,
    Shake = 4,
    Synth = 5,
    Partition = 6,
}

/// Stream `index` of `purpose` under `seed`.
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> RandomStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) ^ index);
    rng
}
