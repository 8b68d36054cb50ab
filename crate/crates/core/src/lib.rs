//! Differentiable score-based likelihoods for CT motion compensation.
//!
//! The crate is `no_std` (with `alloc`) and holds every numerical piece of the
//! pipeline:
//!
//! * [`grid`]: dense images and counter-based random streams,
//! * [`scorefield`]: the variance-exploding noise schedule, probability-flow
//!   drift and closed-form Gaussian score oracles,
//! * [`scorenet`]: a small convolutional score network with hand-written
//!   forward, tangent and backward passes plus denoising score matching,
//! * [`pfode`]: probability-flow ODE sampling, log-likelihoods with
//!   Hutchinson or exact divergence, and adjoint gradients,
//! * [`ctrecon`]: fan-beam projector, filtered backprojection with per-view
//!   rigid motion and its motion Jacobian,
//! * [`motion`]: spline parameterization of rigid motion,
//! * [`optimizer`]: gradient-based motion compensation over pluggable objectives,
//! * [`metrics`]: RMSE, SSIM, reprojection error and motion MAE.
//!
//! File formats, configuration and the command line live in the `ctmoco`
//! companion crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod ctrecon;
mod error;
mod fft;
pub(crate) mod math;
pub mod grid;
pub mod metrics;
pub mod motion;
pub mod optimizer;
pub mod pfode;
pub mod scorefield;
pub mod scorenet;

pub use error::{Error, Result};
pub use grid::{Image, SeededRng, Shape};
