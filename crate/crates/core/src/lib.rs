//! Operator-learning super-resolution of PDE solution fields.
//!
//! The pipeline generates high-resolution solutions of a 1D KdV-Burgers
//! problem and a 2D Poisson problem, downsamples them by average or max
//! pooling, and reconstructs the high-resolution field either with a
//! DeepONet trained on pooled/original pairs or with a cubic-spline
//! baseline. Reconstructions are scored with the relative L2 error.
//!
//! Module map:
//!
//! - [`field`]: grids, sampled fields, norms and the relative L2 metric
//! - [`spectral`]: KdV-Burgers and Poisson solvers producing ground truth
//! - [`pool`]: average/max pooling and pooled-sample coordinates
//! - [`spline`]: not-a-knot cubic splines and separable bicubic reconstruction
//! - [`nn`]: layers, hand-derived gradients, Adam and a gradient checker
//! - [`deeponet`]: branch/trunk assembly and the checkpoint format
//! - [`train`]: datasets, batching and the training loop
//! - [`eval`]: scoring, sweeps and CSV/PGM output
//! - [`diagnostics`]: gradient checks across layers and assemblies

pub mod deeponet;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod field;
pub mod nn;
pub mod pool;
pub mod seed;
pub mod spectral;
pub mod spline;
pub mod train;

pub use error::{Error, Result};
