//! Differentiable building blocks for symmetric-transformer deformable 3D image registration.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, configuration files and
//! the command-line surface live in the companion `symtrans` crate.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod cemsa;
pub mod deform;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod loss;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod synth;
pub mod train;
pub mod scalar;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{ConvSpec, Graph, Var};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;
