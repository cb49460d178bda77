//! A quantization toolkit built around per-layer strategy search.
//!
//! The crate provides a small dense-tensor engine with reverse-mode
//! autodiff, uniform symmetric fake quantization, four post-training
//! calibration strategies (max-abs, KL, cosine grid search, alternating
//! least squares), a differentiable per-layer strategy-mixture search with
//! an efficient single-convolution evaluation, and a quantization-aware
//! training mode with shared-weight mixtures.

pub mod calibrate;
pub mod counters;
pub mod dqss;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod model_io;
pub mod qat;
pub mod quantizer;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use calibrate::CalibratorKind;
pub use error::{CalibrationError, ModelIoError, QatError, SearchError, TensorError};
pub use graph::{Graph, Layer, LayerKind};
pub use quantizer::QuantParams;
pub use tensor::Tensor;
