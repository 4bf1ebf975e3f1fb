//! Copy-mechanism dialogue state tracking.
//!
//! A shared bidirectional LSTM encodes the previous system actions followed by
//! the user utterance. One decoder per informable slot scores every candidate
//! value with a copy score (attention on input tokens that spell the value)
//! plus a value score (attention context against the value's embedding), and
//! turns their sum into an independent probability. Because nothing is
//! normalized across candidates, values can be added to the ontology after
//! training without touching the model.
//!
//! Everything, including the differentiation engine in [`autodiff`], is
//! implemented in plain `f64` Rust.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod embeddings;
pub mod encoder;
pub mod eval;
pub mod model;
pub mod train;

use thiserror::Error;

pub use data::{DialogueCorpus, Goal, Ontology};
pub use eval::{evaluate, EvalReport};
pub use model::Tracker;
pub use train::{train, TrainConfig};

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] autodiff::AutodiffError),
    #[error(transparent)]
    Embedding(#[from] embeddings::EmbeddingError),
    #[error(transparent)]
    Decoder(#[from] decoder::DecoderError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown slot {0:?}")]
    UnknownSlot(String),
    #[error("training diverged at epoch {epoch}, step {step}; last finite loss {last_finite_loss:?}")]
    Diverged {
        epoch: usize,
        step: usize,
        last_finite_loss: Option<f64>,
    },
    #[error("{0}")]
    Contract(String),
}
