//! Numerical core for space-time video super-resolution.
//!
//! Everything in this crate is a pure function of its inputs and works
//! without `std` (an allocator is required). The `std` feature only turns on
//! runtime SIMD detection in the matrix kernels; results are identical
//! either way up to floating-point kernel selection.
//!
//! Layout: videos and feature maps are channel-last (`T×H×W×C`), pixel
//! values live in `[0, 1]`, flows are pixel displacements `(dx, dy)`.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod cfca;
pub mod datagen;
pub mod degrade;
pub mod error;
pub mod flow;
pub mod latent;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod video;
pub mod vrg;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
pub use video::{FlowField, Frame, ScaleFactors, ValidityMask, VideoTensor};
