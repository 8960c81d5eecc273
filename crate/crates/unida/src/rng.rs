//! Seeded random-number streams.
//!
//! Every stochastic consumer (weight init per component, latent sampling,
//! batch shuffling, dataset synthesis) draws from its own ChaCha stream
//! derived from the experiment seed, so adding or reordering consumers in
//! one place never perturbs the draws seen by another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream identifiers, one per independent consumer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    InitFeature,
    InitClassifier,
    InitDiscAdv,
    InitDiscSim,
    InitGenerator,
    Latent,
    BatchSampling,
    Synthesis,
    Pretrain,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::InitFeature => 1,
            Stream::InitClassifier => 2,
            Stream::InitDiscAdv => 3,
            Stream::InitDiscSim => 4,
            Stream::InitGenerator => 5,
            Stream::Latent => 6,
            Stream::BatchSampling => 7,
            Stream::Synthesis => 8,
            Stream::Pretrain => 9,
        }
    }
}

/// A deterministic RNG for the given experiment seed and stream.
pub fn stream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}

/// A per-item RNG (e.g. one synthetic image) independent of all others.
pub fn item_stream(seed: u64, stream_id: u64, item: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ item.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream_id);
    rng
}

/// The style network's weights are pinned independently of the experiment
/// seed so that the style metric is one fixed function.
pub const STYLE_NETWORK_SEED: u64 = 0x5354_594c_4531_3233;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_independent_and_reproducible() {
        let mut a1 = stream(7, Stream::Latent);
        let mut a2 = stream(7, Stream::Latent);
        let mut b = stream(7, Stream::BatchSampling);
        let xs1: Vec<u32> = (0..8).map(|_| a1.gen()).collect();
        let xs2: Vec<u32> = (0..8).map(|_| a2.gen()).collect();
        let ys: Vec<u32> = (0..8).map(|_| b.gen()).collect();
        assert_eq!(xs1, xs2);
        assert_ne!(xs1, ys);
    }
}
