//! RGB-D salient object detection with bi-directional transfer-and-selection
//! encoding, a light-weight group decoder and three-way supervision, plus the
//! training, evaluation and verification harness around the network.
//!
//! Everything runs on a small f64 compute tape with exact reverse-mode
//! gradients, so finite-difference verification, parameter audits and
//! bitwise-deterministic training are first-class citizens rather than
//! afterthoughts. See the guide under `book/` for a narrative tour; its code
//! snippets compile as doc-tests.

pub mod bts;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod loss;
pub mod net;
pub mod ops;
pub mod params;

pub use error::{Error, Result};
pub use graph::{Gradients, Tape, Var};
pub use params::{BufferStore, Builder, ParamId, ParamStore};
