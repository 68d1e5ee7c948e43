//! Conditional caption generation with three decoding regimes: left-to-right
//! autoregressive, single-pass non-autoregressive, and staged masked
//! non-autoregressive refinement driven by a masking-ratio curriculum.

pub mod checkpoint;
pub mod data;
pub mod decoding;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod masking;
pub mod model;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
