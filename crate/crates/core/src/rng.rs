//! Deterministic random-number streams.
//!
//! Every random draw in this crate comes from a ChaCha12 generator keyed by a
//! user-visible `u64` seed and positioned on a dedicated *stream*. ChaCha is a
//! counter-based generator, so streams with the same key are mutually
//! independent and can be opened in any order.
//!
//! Stream ids are packed as
//!
//! ```text
//! bits 56..64  domain tag (what kind of draw)
//! bits 40..56  sub id     (expert index, layer index, ...)
//! bits  0..40  item id    (example index, epoch, ...)
//! ```
//!
//! With one stream per (domain, expert, example), adding an expert or growing
//! a dataset never changes draws that earlier configurations already made.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// What a stream's draws are used for. Tags separate the key space so two
/// purposes can never collide on a stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamDomain {
    /// Task construction (mixture means when not given explicitly).
    TaskGen = 1,
    /// Class label of one example (`item` = example index).
    Label = 2,
    /// Feature vector of one example (`item` = example index).
    Feature = 3,
    /// One expert's prediction for one example (`sub` = expert, `item` = example).
    Expert = 4,
    /// Parameter initialization (`sub` = layer index).
    WeightInit = 5,
    /// Minibatch shuffling (`item` = epoch).
    Shuffle = 6,
    /// Free-form draws for experiments and tests.
    Scratch = 7,
}

const SUB_BITS: u32 = 16;
const ITEM_BITS: u32 = 40;

/// Pack a (domain, sub, item) triple into a stream id.
///
/// Panics if `sub` or `item` exceed their bit budget; both limits are far
/// beyond anything this crate generates.
pub fn stream_id(domain: StreamDomain, sub: u64, item: u64) -> u64 {
    assert!(sub < (1 << SUB_BITS), "stream sub id {sub} out of range");
    assert!(
        item < (1 << ITEM_BITS),
        "stream item id {item} out of range"
    );
    ((domain as u64) << (SUB_BITS + ITEM_BITS)) | (sub << ITEM_BITS) | item
}

/// Open the stream `(domain, sub, item)` of the generator keyed by `seed`.
pub fn stream_rng(seed: u64, domain: StreamDomain, sub: u64, item: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(domain, sub, item));
    rng
}

/// Fisher-Yates permutation of `0..n` drawn from `rng`.
pub fn permutation(n: usize, rng: &mut impl rand::Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}
