//! Desk-scale joint CTC-attention sequence recognizer with accent adapter
//! layers: gated and multi-basis adapters with a coefficient predictor,
//! K-means-regularized multi-task training, and a synthetic multi-accent
//! corpus that keeps every mechanism testable on a laptop.

pub mod accents;
pub mod adapters;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod harness;
pub mod losses;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
