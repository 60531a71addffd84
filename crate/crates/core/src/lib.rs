//! CTQWformer: graph classification driven by trainable continuous-time
//! quantum walks.
//!
//! Pipeline per graph: [`qwe`] learns edge weights, builds a Laplacian
//! Hamiltonian and simulates the walk from every single-node start state;
//! the resulting evolution tensor feeds [`qwgt`] (attention with a walk
//! derived structural bias) and [`qwgr`] (a bidirectional GRU over
//! return-probability series). [`model`] fuses both per layer and
//! classifies; [`trainer`] runs stratified 10-fold cross-validation.

pub mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod qwe;
pub mod qwgr;
pub mod qwgt;
pub mod tensor;
pub mod trainer;
pub mod tu_io;

pub use error::{Error, Result};

/// Version string embedded in every result file.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
