//! Code-switching pre-training for neural machine translation: subword
//! vocabularies, cross-lingual lexicon induction, code-switched span
//! corruption, a from-scratch transformer, training and evaluation.

pub mod cli;
pub mod corpus;
pub mod corrupt;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod lexicon;
pub mod mapping;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod subword;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
