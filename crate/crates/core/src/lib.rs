//! Desk-scale verification engine for two accelerations of training-free
//! video motion transfer: sliding-window attention motion-flow extraction
//! and step-skipping gradient-guided latent optimization. Everything runs
//! on a miniature deterministic attention stack over synthetic videos,
//! with brute-force oracles and an instrumented benchmark harness.
//!
//! Numeric kernels are generic over the scalar type via [`scalar::Real`];
//! the aliases below pin the two supported precisions.

pub mod amf;
pub mod attention;
pub mod config;
pub mod error;
pub mod guidance;
pub mod io;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{AmfError, Result};

/// Default working precision for the pipeline and CLI.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type LatentVideo64 = synth::LatentVideo<f64>;
pub type LatentVideo32 = synth::LatentVideo<f32>;
pub type MotionFlow64 = amf::MotionFlow<f64>;
pub type Tape64 = tape::Tape<f64>;
