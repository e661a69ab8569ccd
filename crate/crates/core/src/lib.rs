//! Sparse-view CT reconstruction toolkit.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense f64 tensors and a reverse-mode tape
//!   over the small set of operations the unrolled network needs.
//! - [`geometry`]: parallel/fan acquisition geometries and the matched
//!   ray-driven projector pair `P`, `Pᵀ`.
//! - [`analytic`]: Ram-Lak filtered backprojection.
//! - [`framelet`]: piecewise-linear undecimated tight frame `W`.
//! - [`solvers`]: conjugate gradient, soft-thresholding and the half-quadratic
//!   splitting reconstructor (HQS-CG).
//! - [`network`]: the unrolled network with a residual CNN warm start for each
//!   CG block, its loss, ADAM and the training loop.
//! - [`simulation`] and [`metrics`]: phantoms, noisy sinograms, PSNR/SSIM/MS-SSIM.
//! - [`io`] and [`config`]: binary containers and `key=value` configuration.

pub mod analytic;
pub mod autodiff;
pub mod config;
pub mod error;
pub mod framelet;
pub mod geometry;
pub mod io;
pub mod linear;
pub mod metrics;
pub mod network;
pub mod simulation;
pub mod solvers;
pub mod tensor;

pub use error::{Error, Result};
pub use geometry::{Beam, Image, ImageGrid, Projector, ScanGeometry, Sinogram};
pub use tensor::Tensor;
