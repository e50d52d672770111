//! Local multiclass calibration toolkit: vector-quantized tessellation of a
//! frozen embedding space, a quantization-aware linear head, a compositional
//! Dirichlet calibrator assembled from shared codeword factors, global and
//! local calibration metrics, and reference baselines.

pub mod baselines;
pub mod calibrator;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod numerics;
pub mod quantizer;
pub mod synthetic;
pub mod tensor;
pub mod vqhead;

pub use error::{Error, Result};
