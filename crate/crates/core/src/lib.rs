//! Regularization by artifact removal (RARE) for undersampled Fourier imaging.
//!
//! The crate is organized bottom-up:
//!
//! * [`operators`]: the multi-coil nonuniform Fourier measurement model;
//! * [`priors`]: artifact-removal operators (identity, TV, a 3D CNN) and the
//!   RED residual they induce;
//! * [`solver`]: the accelerated fixed-point iteration with backtracking line
//!   search, plus a FISTA-TV baseline;
//! * [`training`]: groundtruth-free Artifact2Artifact training of the CNN;
//! * [`simulation`]: phantoms, radial trajectories, coil maps and noise;
//! * [`metrics`]: PSNR and SSIM.

pub mod error;
pub mod image;
pub mod io;
pub mod metrics;
pub mod operators;
pub mod priors;
pub mod solver;
pub mod simulation;
pub mod training;

pub use error::{Error, Result};
pub use image::{ComplexImage, KSpaceData, Shape};
pub use num_complex::Complex64;
