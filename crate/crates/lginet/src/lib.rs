//! Local-global interactive graph network for aspect-level sentiment
//! classification.
//!
//! The pipeline: dependency parses come in (CoNLL-U or JSONL), [`graphs`]
//! builds a merged-aspect syntax graph, a reversible star-shaped relation
//! graph, and stitches them into a local-global interactive graph;
//! [`model`] runs stacked interactive layers over the pair (position-weighted
//! graph convolution on the syntax side, reversible relational attention on
//! the relation side, plus one of three cross-graph passes) and decodes a
//! three-way sentiment; [`training`] and [`eval`] provide the optimizer,
//! metrics and ablation harness. Everything differentiable sits on the
//! [`numcore`] tape.

pub mod error;
pub mod eval;
pub mod graphs;
pub mod model;
pub mod numcore;
pub mod synth;
pub mod training;

pub mod cli;

pub use error::{Error, Result};
