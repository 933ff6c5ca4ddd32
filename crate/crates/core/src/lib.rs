//! Semantic-composition image synthesis.
//!
//! A layout is encoded into a pyramid of per-position mixing weights
//! ("semantic vectors"); convolution and normalization layers mix a small
//! bank of shared candidates with those weights at every position.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod adversary;
pub mod autodiff;
pub mod condops;
pub mod error;
pub mod eval;
pub mod generators;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod params;
pub mod scalar;
pub mod synthdata;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::{Shape, Tensor4};
