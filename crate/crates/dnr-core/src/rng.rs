//! Seeded RNG streams.
//!
//! Every source of randomness in a run is a ChaCha8 stream derived from one
//! seed plus a stream id. Keeping init, shuffling, noise draws and evaluation
//! on separate streams means that adding or removing draws on one stream
//! (e.g. skipping noise generation entirely) cannot shift any other stream.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_WORLD: u64 = 1;
pub const STREAM_RETRIEVER: u64 = 2;
pub const STREAM_INIT: u64 = 3;
pub const STREAM_SHUFFLE: u64 = 4;
pub const STREAM_NOISE: u64 = 5;
pub const STREAM_EVAL: u64 = 6;
pub const STREAM_GENERATOR_INIT: u64 = 7;

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
