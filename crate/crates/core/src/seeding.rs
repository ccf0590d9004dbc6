//! Deterministic per-purpose random streams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent stream labels. Each consumer derives its own generator so
/// that resuming or reordering work never shifts another stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    PretrainGenerator = 2,
    PretrainDiscriminator = 3,
    Adversarial = 4,
    Evaluation = 5,
    Augmentation = 6,
    Generation = 7,
    EarlyStop = 8,
}

/// Generator for item `index` of `stream` under `seed`.
pub fn derive(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(index)));
    rng.set_stream(stream as u64);
    rng
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
