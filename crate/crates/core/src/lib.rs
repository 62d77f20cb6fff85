//! Desk-scale document-attention speech recognizer.
//!
//! The model couples a conformer-style utterance encoder with a transformer
//! decoder whose self-attention spans a whole document of utterances while
//! its cross-attention stays scoped to each token's own utterance. Training
//! uses a hybrid CTC/attention loss; decoding is joint beam search with
//! incremental CTC prefix scoring, optionally conditioned on in-context
//! example pairs.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoding;
pub mod icft;
pub mod error;
pub mod mat;
pub mod model;
pub mod objectives;
pub mod params;
pub mod train;
pub mod vocab;

pub use error::{Result, SiclError};
