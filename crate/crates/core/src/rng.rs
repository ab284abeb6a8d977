//! Counter-based random streams.
//!
//! Every random draw in a run comes from a stream addressed by
//! `(seed, client, round, purpose)`. The address is hashed into a ChaCha8 key,
//! so a stream can be materialised at any time, on any thread, and always
//! yields the same sequence. Evaluation order never changes results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// What a stream is used for. Distinct tags give independent streams for the
/// same `(client, round)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Warmup = 2,
    LocalTrain = 3,
    Sampling = 4,
    Byzantine = 5,
    DataTask = 6,
    DataPool = 7,
    Partition = 8,
    Split = 9,
    Flip = 10,
    FineTune = 11,
    MeanEstimation = 12,
    UnseenPool = 13,
    UnseenPartition = 14,
    UnseenFlip = 15,
    ByzantineSelect = 16,
    Trial = 17,
    Test = 99,
}

/// One draw from the standard normal distribution.
#[inline]
pub fn std_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, rng)
}

/// Client slot used for streams that do not belong to any client.
pub const SERVER: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub client: u64,
    pub round: u64,
    pub purpose: Purpose,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, client: u64, round: u64, purpose: Purpose) -> Self {
        RngStream {
            seed,
            client,
            round,
            purpose,
        }
    }

    /// Server-side stream for `purpose` at `round`.
    pub fn server(seed: u64, round: u64, purpose: Purpose) -> Self {
        RngStream::new(seed, SERVER, round, purpose)
    }

    pub fn with_client(self, client: u64) -> Self {
        RngStream { client, ..self }
    }

    pub fn with_round(self, round: u64) -> Self {
        RngStream { round, ..self }
    }

    pub fn with_purpose(self, purpose: Purpose) -> Self {
        RngStream { purpose, ..self }
    }

    fn key(&self) -> [u8; 32] {
        let mut h = splitmix64(self.seed);
        h = splitmix64(h ^ self.client);
        h = splitmix64(h ^ self.round);
        h = splitmix64(h ^ self.purpose as u64);
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            h = splitmix64(h);
            chunk.copy_from_slice(&h.to_le_bytes());
        }
        key
    }

    /// Fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.key())
    }
}
