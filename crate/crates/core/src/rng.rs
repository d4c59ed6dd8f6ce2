//! Seed derivation: every random consumer gets its own ChaCha stream so that
//! runs replay exactly from `(seed, purpose, index)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Sampler = 1,
    Meiosis = 2,
    Dropout = 3,
    Init = 4,
    Finetune = 5,
    Synth = 6,
}

pub fn stream(seed: u64, purpose: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) ^ index);
    rng
}

/// Independent 64-bit seed for a sub-component.
pub fn derive(seed: u64, purpose: Stream, index: u64) -> u64 {
    use rand::Rng;
    stream(seed, purpose, index).random()
}
