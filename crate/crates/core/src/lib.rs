//! Sketch+text composed image retrieval.
//!
//! A sketch is inverted into a pseudo-word token in the word-embedding space
//! of a frozen dual encoder, so that a query can be written as
//! `prompt ‖ pseudo-word ‖ connector ‖ text` and encoded by the ordinary text
//! transformer. Training needs only sketch/photo pairs: a token derived from
//! the sketch-photo feature difference stands in for the missing text.

pub mod checkpoint;
pub mod composer;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod index;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod tokenizer;
pub mod trainer;

#[doc(hidden)]
pub mod testing;

pub use candle_core as candle;
pub use error::{DuetError, Result};

/// The guide's snippets, compiled and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/inversion.md")]
    pub struct Inversion;
    #[doc = include_str!("../../../book/src/composition.md")]
    pub struct Composition;
    #[doc = include_str!("../../../book/src/objectives.md")]
    pub struct Objectives;
    #[doc = include_str!("../../../book/src/training.md")]
    pub struct Training;
    #[doc = include_str!("../../../book/src/retrieval.md")]
    pub struct Retrieval;
}
