//! Race and ethnicity classification from names.
//!
//! The pipeline: ingest labeled names ([`data`]), normalize them
//! ([`normalize`]), learn a small BPE vocabulary ([`bpe`]), pretrain a
//! transformer encoder with a masked-LM objective, transfer its weights into a
//! sequence classifier ([`model`], [`train`]) and report per-class metrics
//! ([`metrics`]).

pub mod bpe;
pub mod data;
mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod normalize;
pub mod synthetic;
pub mod train;

pub use error::{Error, ErrorKind};
