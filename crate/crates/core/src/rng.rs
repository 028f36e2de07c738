//! Seeded random streams.
//!
//! Every stochastic routine derives independent ChaCha8 streams from a base
//! seed and a small path of tags, so results do not depend on thread count
//! or on the order in which parallel chunks finish.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Number of Monte Carlo draws handled by one stream.
pub const CHUNK: usize = 1 << 14;

pub const TAG_CALIBRATE: u64 = 1;
pub const TAG_HOLDOUT: u64 = 2;
pub const TAG_NU: u64 = 3;
pub const TAG_BATCH: u64 = 4;
pub const TAG_ASYMPTOTIC: u64 = 5;
pub const TAG_SIM: u64 = 6;
pub const TAG_REGRET: u64 = 7;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a path of tags into a seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

/// Independent stream `stream` of the generator keyed by `seed`.
pub fn substream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Splits `total` into fixed-size chunks, returned as `(index, len)`.
pub(crate) fn chunks(total: usize) -> Vec<(u64, usize)> {
    let mut out = Vec::with_capacity(total.div_ceil(CHUNK));
    let mut done = 0;
    let mut i = 0u64;
    while done < total {
        let len = CHUNK.min(total - done);
        out.push((i, len));
        done += len;
        i += 1;
    }
    out
}
