//! Neural attentive multiview machines for item similarity.
//!
//! Items are described by several direct views (collaborative-filtering
//! embeddings, genre and tag vectors, text vectors, ...). [`model::NamModel`]
//! learns a per-view similarity for each view and an attention mechanism that
//! fuses them into one score per item pair, falling back to whichever views an
//! item actually has. That fallback is what lets the model recommend cold
//! items that have no interaction data yet.
//!
//! The pieces, bottom up:
//!
//! - [`math`]: the numeric kernel with analytic gradients, Adam, and a
//!   finite-difference checker.
//! - [`views`]: catalogs, view encoders and the view registry.
//! - [`baskets`] and [`item2vec`]: co-consumption data and CF pretraining.
//! - [`model`]: towers, attention fusion, losses and backpropagation.
//! - [`training`]: pair datasets, negative sampling, two-phase training and
//!   checkpoints.
//! - [`eval`]: HR@K / MRR@K, cold splits and cross-validation.
//! - [`ingest`]: ratings, session and metadata parsers, and registry
//!   construction from metadata.
//! - [`pipeline`]: item2vec, registry and both training phases in one call.
//! - [`diagnostics`]: gradient checks behind `nam selftest`.
//!
//! The guide in `book/` walks through the same pipeline with runnable
//! examples.

pub mod baskets;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod item2vec;
pub mod math;
pub mod model;
pub mod pipeline;
pub mod training;
pub mod views;

pub use error::{NamError, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/views.md")]
    mod views {}
    #[doc = include_str!("../../../book/src/scoring.md")]
    mod scoring {}
    #[doc = include_str!("../../../book/src/cold.md")]
    mod cold {}
    #[doc = include_str!("../../../book/src/item2vec.md")]
    mod item2vec {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/ingest.md")]
    mod ingest {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
