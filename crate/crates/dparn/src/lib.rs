//! Full-band (48 kHz) speech enhancement engine.
//!
//! The crate bundles everything needed to train and run a dual-path
//! attention-recurrent denoising network at desk scale: a dense-tensor
//! reverse-mode autodiff core, a WAV/STFT front-end, a learnable
//! warped-frequency spectral compression, the network itself, a
//! power-compressed complex spectral loss with Adam and a warm-up
//! schedule, and a scale-invariant SDR metric.
//!
//! See the `examples/` directory for one runnable program per capability
//! and the `dparn` binary for the command-line surface.

pub mod dsp;
pub mod error;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scm;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{DparnError, Result};
