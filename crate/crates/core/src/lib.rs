//! Controllable ensemble CNN-transformer image classifier.
//!
//! The model runs three convolutional sub-encoders at different scales,
//! decodes each back to the input resolution with transposed convolutions,
//! fuses the decoded maps with a convex combination controlled by three
//! ensemble coefficients, and classifies the fused map with a hierarchical
//! shifted-window transformer. Everything, including reverse-mode gradients,
//! is implemented on a small dense `f64` tensor core.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod experiment;
pub mod error;
pub mod kernels;
pub mod layout;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use autograd::{Activation, Gradients, Graph, NodeId};
pub use decoder::EnsembleCoefficients;
pub use error::{Error, Result};
pub use kernels::ConvGeometry;
pub use model::{Cetc, CetcForward, ModelConfig};
pub use params::ParamStore;
pub use tensor::Tensor;
