//! Desk-scale model-stitching laboratory.
//!
//! The crate trains tiny ViT-style backbones from scratch on synthetic data,
//! stitches a frozen source prefix into a frozen target suffix through a
//! trainable stitch layer, and measures whether the composition keeps (or
//! exceeds) the constituents' accuracy. On top of that sit stitch trees that
//! share a common trunk across several backbones, plus the cost/gain
//! accounting for that sharing.
//!
//! Numerics are generic over the scalar type: `f32` is the training default,
//! `f64` the verification mode used by the gradient-check harness.

pub mod backbone;
pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod scalar;
pub mod stitch;
pub mod tensor;
pub mod training;
pub mod verify;
pub mod vst;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Default training precision.
pub type Real = f32;
/// Tensor in training precision.
pub type Tensor32 = Tensor<f32>;
/// Tensor in verification precision.
pub type Tensor64 = Tensor<f64>;
