//! Cross-lingual open information extraction.
//!
//! A small transformer tagger extracts n-ary tuples with a two-step scheme
//! (predicates first, then the arguments of each predicate). Training runs
//! in three stages that tune disjoint parameter groups, the last of which
//! trains a mixture of low-rank language adapters on multilingual data
//! produced by a two-prompt LLM annotation pipeline. Token-level tuple
//! matching and fact-synset matching score the output.

pub mod annotate;
pub mod autodiff;
pub mod bio;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod heads;
pub mod model;
pub mod molora;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
