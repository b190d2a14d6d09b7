//! Embedding-matching acoustic-to-word recognition.
//!
//! The acoustic model emits, per frame, a blank scalar and one or more
//! embeddings that are matched against a frozen matrix of word (or
//! pronunciation) embeddings. New words, such as a user's contact names, are
//! added at test time by appending columns to that matrix.

pub mod cli;
pub mod ctc;
pub mod decoder;
pub mod embed;
pub mod error;
pub mod eval;
pub mod fmt;
pub mod lm;
pub mod manifest;
pub mod math;
pub mod model;
pub mod pipeline;
pub mod pronlex;
pub mod synth;

pub use error::{Error, Result};
