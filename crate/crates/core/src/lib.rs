//! Retrieval-based multi-image visual question answering, desk scale.
//!
//! The pipeline has two stages: a pairwise relevance encoder scores every
//! image in a pool against the question and the top-K images become the
//! context for a multi-image encoder-decoder that generates a free-form
//! answer. Everything runs on a small tape-based autodiff substrate
//! ([`numerics`]) over a synthetic scene-graph world ([`synthworld`]) with a
//! template-curated QA corpus ([`curation`]).
//!
//! Data-parallel inner loops (pool scoring, scene encoding, per-example
//! gradient batches) go through [`par`], which uses rayon when the `parallel`
//! feature (default) is enabled and falls back to sequential iteration
//! otherwise. Both paths produce bitwise-identical results.

pub mod baselines;
pub mod curation;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod numerics;
pub mod par;
pub mod relevance;
pub mod synthworld;
