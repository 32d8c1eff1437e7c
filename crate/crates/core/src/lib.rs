//! Multi-camera image features to a bird's-eye-view grid through
//! height-compressed "width" features.
//!
//! The forward path: [`width::height_maxpool`] collapses each image column,
//! [`width::refine`] lets the pooled columns attend to each other and to their
//! own pixels, [`encoding::width_refpe`] builds a positional encoding per
//! column from depth-binned reference points, and [`decoder::transform`] lets
//! every BEV cell attend to all columns of all cameras.
//! [`pipeline::Pipeline`] wires these together with the learned heads.
//!
//! All computation is `f64`. Data-parallel loops use rayon behind the
//! `parallel` feature; see [`exec`].

// NaN-rejecting `!(x > 0.0)` checks and index loops over parallel arrays
// are deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod aux;
pub mod bvt;
pub mod cost;
pub mod decoder;
pub mod encoding;
pub mod error;
pub mod exec;
pub mod faults;
pub mod geometry;
pub mod gradcheck;
pub mod harness;
pub mod macs;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod width;

pub use error::{Error, Result};
pub use gradcheck::grad_check;
pub use rng::Rng;
pub use tensor::{matmul, softmax, Tensor};
