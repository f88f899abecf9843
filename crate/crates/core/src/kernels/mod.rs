//! Slice-level forward/backward kernels shared by the graph ops.

pub mod conv;
pub mod warp;
