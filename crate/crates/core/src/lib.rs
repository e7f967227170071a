//! Focal-guidance toolkit for a toy latent-video diffusion transformer:
//! rectified-flow dynamics, spatial-coherence layer diagnostics,
//! fine-grained semantic guidance with an attention cache, synthetic
//! scenes with known ground truth, and benchmark scoring arithmetic.
//!
//! Everything is deterministic: all randomness flows from explicit seeds
//! through a splitmix64 generator, and reductions use fixed orders so
//! reruns are bit-identical (with or without the `parallel` feature).

pub mod autodiff;
pub mod bench;
pub mod diagnostics;
pub mod dit;
pub mod error;
pub mod flow;
pub mod guidance;
pub mod par;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
