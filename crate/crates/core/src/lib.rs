//! Data-efficacy toolkit: score training samples, optionally select a
//! top-K subset, reorder the corpus (shuffle / sort / fold), then train a
//! small built-in language model on the reorganized data and measure the
//! effect on held-out loss.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`corpus`]: JSONL ingestion, byte-level tokenization, score files
//! - [`tinylm`]: a windowed feed-forward next-token model over a flat
//!   parameter vector, with exact per-sample gradients and HVPs
//! - [`ngram`]: add-k smoothed n-gram perplexity scorer (difficulty proxy)
//! - [`annotate`]: bi-level proxy annotation producing simplex-valued
//!   per-sample weights from gradient trajectories
//! - [`regressor`]: generalizes proxy scores to the full corpus via a
//!   linear head over mean-pooled embeddings
//! - [`pipeline`]: top-K selection and shuffle / sort / fold orderings
//! - [`harness`]: seeded end-to-end experiments and report generation
//!
//! Everything is deterministic given explicit seeds: reductions sum in a
//! fixed order, all randomness flows through seeded generators.

pub mod annotate;
pub mod corpus;
pub mod error;
pub mod harness;
pub mod ngram;
pub mod pipeline;
pub mod regressor;
pub mod tinylm;

pub use error::Error;

/// Caps the global worker pool used for per-sample evaluations.
///
/// Must be called before any parallel work runs; later calls fail once the
/// pool exists.
pub fn set_thread_count(threads: usize) -> Result<(), Error> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config {
            msg: format!("thread pool: {e}"),
        })
}
