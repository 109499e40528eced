//! Blur-aware 3D Gaussian splatting.
//!
//! A CPU reference implementation of Gaussian splatting driven by a physical
//! motion-blur formation model: blurred observations are explained as the
//! average of sharp renders along an SE(3) camera trajectory spanning the
//! exposure, and Gaussians and trajectories are optimized jointly.

// Guards like `!(x > 0.0)` are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod binio;
pub mod edi;
pub mod error;
pub mod eventsim;
pub mod harness;
pub mod imagebuf;
pub mod liegroup;
pub mod metrics;
pub mod optimizer;
pub mod renderer;
pub mod scene;
pub mod sfm_init;

pub use error::{Error, Result};
