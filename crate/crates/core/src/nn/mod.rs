//! Minimal neural-network machinery with hand-derived reverse-mode gradients.
//!
//! Every layer maps a `[batch, features]` matrix to another. Convolution and
//! batch-norm layers interpret features as channel-major `[C][H][W]` blocks,
//! so flattening is a no-op.

mod adam;
mod batchnorm;
mod conv;
mod dense;
mod gradcheck;
mod init;
mod loss;
mod sequential;

pub use adam::{AdamConfig, AdamState};
pub use batchnorm::{BatchNormLayer, BN_EPS, BN_MOMENTUM};
pub use conv::Conv2DLayer;
pub use dense::{relu, softplus, Activation, DenseLayer};
pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport, NetworkObjective, Objective};
pub use init::Init;
pub use loss::mse_loss;
pub use sequential::{Layer, Sequential, Tape};

use ndarray::Array2;

/// Row-major `[batch, features]` activations.
pub type Matrix = Array2<f64>;

/// Per-tensor gradients, ordered like the owning network's parameters.
pub type Gradients = Vec<Vec<f64>>;

/// Flatten an owned matrix into row-major order.
pub(crate) fn into_flat(a: Array2<f64>) -> Vec<f64> {
    if a.is_standard_layout() {
        a.into_raw_vec_and_offset().0
    } else {
        a.iter().copied().collect()
    }
}
