//! Ground-truth generators: a pseudospectral KdV-Burgers integrator and a
//! Fourier/finite-difference Poisson solver.

mod kdvb;
mod poisson;

pub use kdvb::{
    kdvb_initial_condition, kdvb_rhs_nonlinear, sample_kdvb_params, solve_kdvb, solve_kdvb_from, KdvbParams,
    KdvbSolverConfig,
};
pub use poisson::{
    discrete_laplacian, sample_poisson_source, solve_poisson, solve_poisson_with_boundary,
    thomas_solve, PoissonBoundary, PoissonInstance, MIN_GENERATION_NX,
};

use std::fmt;
use std::str::FromStr;

use rustfft::num_complex::Complex64;

use crate::{Error, Result};

/// Which family of ground-truth fields a dataset holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Case {
    /// 1D KdV-Burgers snapshots.
    Kdvb,
    /// 2D Poisson solutions.
    Poisson,
}

impl Case {
    pub fn name(self) -> &'static str {
        match self {
            Case::Kdvb => "kdvb",
            Case::Poisson => "poisson",
        }
    }

    pub fn ndim(self) -> usize {
        match self {
            Case::Kdvb => 1,
            Case::Poisson => 2,
        }
    }
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Case {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kdvb" => Ok(Case::Kdvb),
            "poisson" => Ok(Case::Poisson),
            other => Err(Error::InvalidParameter(format!(
                "unknown case {other:?} (expected kdvb or poisson)"
            ))),
        }
    }
}

/// Signed integer mode index for FFT bin `j` of an `n`-point transform.
pub(crate) fn mode_index(j: usize, n: usize) -> i64 {
    if j <= n / 2 {
        j as i64
    } else {
        j as i64 - n as i64
    }
}

pub(crate) fn to_complex(values: &[f64]) -> Vec<Complex64> {
    values.iter().map(|&v| Complex64::new(v, 0.0)).collect()
}
