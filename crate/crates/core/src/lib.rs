//! Weakly-supervised temporal grounding with multi-level attentional
//! reconstruction.
//!
//! A sentence query is localised in a video by attending over a dense map of
//! candidate segments; the only training signal is how well the
//! attention-pooled video feature reconstructs the query.

pub mod checkpoint;
pub mod data_io;
pub mod error;
pub mod inference;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod proposal;
pub mod reconstruction;
pub mod train;

pub use error::{MarnError, Result};
