//! A desk-scale streaming transformer-transducer lab.
//!
//! The pieces: an f64 reverse-mode autodiff graph, chunked streaming
//! attention masks, a transducer model with one shared encoder and per-target
//! prediction/joint branches, the lattice loss, greedy/beam streaming
//! decoding, a synthetic multilingual corpus generator, quality and latency
//! metrics, and a trainer with frozen-encoder language expansion.

pub mod checkpoint;
pub mod corpus;
pub mod decoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod graph;
pub mod mask;
pub mod tensor;
pub mod trainer;
pub mod transducer;

pub mod verify;

pub use error::{Error, Result};
