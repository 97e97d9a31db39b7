//! Bidirectional variational autoencoders.
//!
//! A single network encodes on its forward pass and decodes on its reverse
//! pass, with every weight shared between the two directions. The crate
//! provides the tensor and autodiff runtime, the bidirectional layers, the
//! model and its unidirectional twin, training objectives, evaluation metrics,
//! data and checkpoint I/O, and the training loop.

pub mod autodiff;
pub mod error;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
