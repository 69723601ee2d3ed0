//! Deterministic random-number streams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator addressed by
//! `(seed, stream)`. ChaCha is counter-based, so any stream can be opened in
//! O(1) without generating its predecessors; parallel stages give each work
//! item its own stream id and stay reproducible for any thread count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Number of stream slots reserved per item when a stage needs several
/// independent streams for the same item (for example one per purpose).
pub const STREAMS_PER_ITEM: u64 = 16;

/// Opens the ChaCha stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Opens sub-stream `purpose` of item `item` under `seed`.
///
/// `purpose` must be below [`STREAMS_PER_ITEM`]; item ids are unbounded.
pub fn item_rng(seed: u64, item: u64, purpose: u64) -> ChaCha8Rng {
    debug_assert!(purpose < STREAMS_PER_ITEM);
    stream_rng(seed, item.wrapping_mul(STREAMS_PER_ITEM) + purpose)
}
