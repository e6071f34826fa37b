//! Contextualized visual-token pruning on a desk-scale vision-language model.
//!
//! A small classifier scores visual tokens from the visual features and the
//! text context; the lowest-scoring tokens are removed before the language
//! model ever sees them. The crate covers the whole loop: a synthetic task
//! with known salient tokens, a toy decoder, attention-label and soft-mask
//! training of the classifier, pruned inference and a cost harness.

pub mod data;
pub mod error;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod scoring;
pub mod training;

pub use error::{Error, Result};
