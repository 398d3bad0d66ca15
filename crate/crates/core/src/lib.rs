//! Occlusion-robust 3D hand mesh reconstruction from a monocular crop and a
//! 2D hand pose.
//!
//! The pipeline lifts the 2D pose to a per-joint spatial prior with Chebyshev
//! graph convolutions over the hand skeleton ([`kgc`]), fuses that prior with
//! image features through bidirectional cross-attention ([`cat`]), and
//! regresses pose/shape coefficients for a linear-blend-skinning hand
//! ([`head`], [`hand_model`]).
//!
//! Everything here is `no_std` + `alloc`: the tensor engine with reverse-mode
//! gradients ([`tape`]), the networks, evaluation metrics ([`metrics`]) and
//! the seeded synthetic dataset generator ([`synth`]). File formats, the CLI
//! and the training harness live in the `handgcat` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod cat;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod hand_graph;
pub mod hand_model;
pub mod head;
pub mod kgc;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod param;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use param::{ParamId, Params};
pub use scalar::{DType, Scalar};
pub use tape::{ConvSpec, Gradients, Tape, Var};
pub use tensor::Tensor;
