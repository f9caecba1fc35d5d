//! Non-autoregressive item-list continuation.
//!
//! A masked bidirectional Transformer reads an input list followed by `K`
//! `<MASK>` slots and predicts every slot in a single encoder pass. Items are
//! decoded through either a flat softmax over the whole vocabulary or a
//! two-stage classifier (category first, then the items of that category).
//! Training follows an easy-to-hard curriculum over the fraction of the
//! target list that is masked.
//!
//! Module map:
//!
//! - [`corpus`]: list files, frequency/length filtering, splitting, synthetic corpora
//! - [`categorizer`]: CBOW item embeddings and K-means categories
//! - [`masker`]: hybrid item masking into token bundles
//! - [`scheduler`]: naive and step-wise difficulty schedules
//! - [`model`]: embeddings, encoder, classifiers, losses and exact gradients
//! - [`trainer`]: Adam loop with early stopping
//! - [`inference`]: AR / NAR / recall decoding, deduplication, ranking metrics
//! - [`bench`]: latency measurement and classifier MAC accounting
//! - [`cli`]: experiment configuration and subcommands

pub mod bench;
pub mod categorizer;
pub mod cli;
pub mod corpus;
mod error;
pub mod inference;
pub mod masker;
pub mod model;
pub mod scheduler;
pub mod trainer;

pub use error::{Error, Result};

/// Dense internal item id in `0..M`.
pub type ItemId = u32;
/// Dense internal category id in `0..N`.
pub type CategoryId = u32;

/// Seeded deterministic generator used across the crate.
pub type SeededRng = rand_chacha::ChaCha8Rng;

pub(crate) fn seeded_rng(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}

/// Generator for an independent stream derived from `(seed, stream)`.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> SeededRng {
    let mut rng = seeded_rng(seed);
    rng.set_stream(stream);
    rng
}
