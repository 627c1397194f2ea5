//! Condition-aware similarity embeddings learned from weakly labelled triplets.
//!
//! An encoder maps item features into a shared embedding space. A bank of
//! learnable condition masks re-weights that space, and a small branch network
//! predicts how much each mask matters for a given pair of items. Training uses
//! a margin triplet objective with mask and embedding penalties, optionally
//! joined by text-alignment terms.

pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod math;
pub mod model;
pub mod training;

pub use error::{Error, Result};
