//! Construction kit for a lightweight single-stage weed detector built
//! around parameter-free attention.
//!
//! The pieces: a dense rank-4 tensor with a reverse-mode gradient tape
//! ([`tensor`]), the SimAM and SPAB attention modules ([`attention`]), the
//! detector block library ([`blocks`]) and graph builder with parameter/MAC
//! accounting ([`graph`]), box geometry / losses / NMS ([`detection`]),
//! dataset utilities and checkpoints ([`data`]), detection metrics
//! ([`eval`]), gradient-weighted saliency ([`explain`]) and a desk-scale
//! training loop ([`train`]).

pub mod attention;
pub mod blocks;
pub mod data;
pub mod detection;
pub mod error;
pub mod eval;
pub mod explain;
pub mod gradcheck;
pub mod graph;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::tape::{Gradients, ParamTrace, Tape, ValueId};
pub use tensor::{real, FeatureMap, Scalar};
