use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeded generator on an independent stream. Every random choice in the
/// crate goes through here so results depend only on `(seed, stream)`.
pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream identifiers, kept apart so adding draws in one stage never shifts
/// another stage's choices.
pub(crate) mod streams {
    pub const CLASSIFICATION_SET: u64 = 0x100;
    pub const PAIRS: u64 = 0x200;
    pub const REFERENCES: u64 = 0x300;
    pub const INIT: u64 = 0x400;
    pub const SHUFFLE: u64 = 0x500;
    pub const PROMPTS: u64 = 0x600;
    pub const SYNTH: u64 = 0x700;
}
