//! Depth compression for small Pre-LN decoder transformers.
//!
//! The toolkit merges adjacent transformer blocks whose hidden states have
//! grown redundant ("flattening"), then prunes the widened blocks back to
//! the original architecture: attention heads by calibration-driven
//! importance, MLP channels by ridge leverage scores with a closed-form
//! compensation of the down projection. The result is a shallower model
//! with the same per-layer shape as the original.

pub mod calibration;
pub mod error;
pub mod eval;
pub mod flatten;
pub mod model;
pub mod model_io;
pub mod numerics;
pub mod pipeline;
pub mod prune_mha;
pub mod prune_mlp;

pub use error::{Error, Result};
