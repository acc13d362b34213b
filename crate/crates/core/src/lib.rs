//! Vibration time series to similarity graphs, and a graph-attention + LSTM
//! classifier over those graphs.
//!
//! The pipeline runs: [`signal`] (recordings and labeled samples) ->
//! [`entropy`] (window selection) -> [`dtw`] (segment similarity) ->
//! [`graph`] (thresholded similarity graph) -> [`nn`] (model and training
//! primitives) -> [`eval`] (cross-validation, metrics, statistics).

pub mod dtw;
pub mod entropy;
pub mod error;
pub mod eval;
pub mod graph;
pub mod nn;
pub mod signal;

pub use error::{Error, Result};
