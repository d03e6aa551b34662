use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{mode_index, to_complex};
use crate::field::{check_finite, Field2D, Grid2D};
use crate::{seed, Error, Result};

pub const SOURCE_RANGE: (f64, f64) = (0.0, 100.0);

/// The Dirichlet data at wavenumber 16 is resolved only on grids at least
/// this wide in x.
pub const MIN_GENERATION_NX: usize = 64;

/// A random source term `f` for `∇²u = f`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoissonInstance {
    pub source: Field2D,
    pub seed: u64,
}

/// i.i.d. uniform `[0, 100]` source values at every grid point.
pub fn sample_poisson_source(seed: u64, grid: &Grid2D) -> PoissonInstance {
    let mut rng = seed::rng(seed);
    let values = (0..grid.len())
        .map(|_| rng.gen_range(SOURCE_RANGE.0..=SOURCE_RANGE.1))
        .collect();
    PoissonInstance {
        source: Field2D::new(*grid, values).expect("sampled source matches its grid"),
        seed,
    }
}

/// Dirichlet data on the bottom (`y = 0`) and top (`y = π`) rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PoissonBoundary {
    pub bottom: Vec<f64>,
    pub top: Vec<f64>,
}

impl PoissonBoundary {
    /// `u(x, 0) = 3 sin(16x)`, `u(x, π) = 3 cos(16x)`.
    pub fn oscillatory(grid: &Grid2D) -> Self {
        let xs = grid.xs();
        Self {
            bottom: xs.iter().map(|x| 3.0 * (16.0 * x).sin()).collect(),
            top: xs.iter().map(|x| 3.0 * (16.0 * x).cos()).collect(),
        }
    }

    pub fn zero(grid: &Grid2D) -> Self {
        Self {
            bottom: vec![0.0; grid.nx()],
            top: vec![0.0; grid.nx()],
        }
    }
}

/// Solve `∇²u = f` with the oscillatory Dirichlet rows, periodic in x.
pub fn solve_poisson(instance: &PoissonInstance, grid: &Grid2D) -> Result<Field2D> {
    if grid.nx() < MIN_GENERATION_NX {
        return Err(Error::InvalidGrid(format!(
            "boundary data at wavenumber 16 needs nx >= {MIN_GENERATION_NX}, got {}",
            grid.nx()
        )));
    }
    solve_poisson_with_boundary(&instance.source, &PoissonBoundary::oscillatory(grid))
}

/// Wavenumber for x-mode `j` on a period of π.
fn wavenumber(j: usize, nx: usize) -> f64 {
    2.0 * mode_index(j, nx) as f64
}

/// Solve `∇²u = f` for arbitrary Dirichlet rows.
///
/// Each x-Fourier mode decouples into `(∂yy − k²) û = f̂` over the interior
/// rows, discretized with second-order central differences and solved with
/// the Thomas algorithm. The boundary rows of the result are the given data.
pub fn solve_poisson_with_boundary(source: &Field2D, boundary: &PoissonBoundary) -> Result<Field2D> {
    let grid = *source.grid();
    let (nx, ny) = (grid.nx(), grid.ny());
    if boundary.bottom.len() != nx || boundary.top.len() != nx {
        return Err(Error::Shape(format!(
            "boundary rows must have {nx} entries"
        )));
    }
    check_finite(source.values())?;
    check_finite(&boundary.bottom)?;
    check_finite(&boundary.top)?;

    let mut planner = FftPlanner::new();
    let forward = planner.plan_fft_forward(nx);
    let inverse = planner.plan_fft_inverse(nx);

    // Spectral rows, j = 0..ny.
    let mut rows: Vec<Vec<Complex64>> = Vec::with_capacity(ny);
    for j in 0..ny {
        let data = if j == 0 {
            &boundary.bottom[..]
        } else if j == ny - 1 {
            &boundary.top[..]
        } else {
            source.row(j)
        };
        let mut buf = to_complex(data);
        forward.process(&mut buf);
        rows.push(buf);
    }

    let dy = grid.y(1);
    let inv_dy2 = 1.0 / (dy * dy);
    let interior = ny - 2;
    let off = vec![inv_dy2; interior];
    let mut diag = vec![0.0; interior];
    let mut rhs_re = vec![0.0; interior];
    let mut rhs_im = vec![0.0; interior];
    for m in 0..nx {
        let k = wavenumber(m, nx);
        diag.iter_mut().for_each(|d| *d = -2.0 * inv_dy2 - k * k);
        for j in 0..interior {
            let mut r = rows[j + 1][m];
            if j == 0 {
                r -= rows[0][m] * inv_dy2;
            }
            if j + 1 == interior {
                r -= rows[ny - 1][m] * inv_dy2;
            }
            rhs_re[j] = r.re;
            rhs_im[j] = r.im;
        }
        thomas_solve(&off, &diag, &off, &mut rhs_re)?;
        thomas_solve(&off, &diag, &off, &mut rhs_im)?;
        for j in 0..interior {
            rows[j + 1][m] = Complex64::new(rhs_re[j], rhs_im[j]);
        }
    }

    let inv_nx = 1.0 / nx as f64;
    let mut values = Vec::with_capacity(grid.len());
    values.extend_from_slice(&boundary.bottom);
    for row in rows.iter_mut().take(ny - 1).skip(1) {
        inverse.process(row);
        values.extend(row.iter().map(|c| c.re * inv_nx));
    }
    values.extend_from_slice(&boundary.top);
    Field2D::new(grid, values)
}

/// Solve a tridiagonal system in place. `lower[i]` couples row `i` to
/// `i − 1` (ignored for `i = 0`), `upper[i]` couples row `i` to `i + 1`.
pub fn thomas_solve(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64]) -> Result<()> {
    let n = rhs.len();
    if diag.len() != n || lower.len() != n || upper.len() != n {
        return Err(Error::Shape("tridiagonal bands must match the rhs length".into()));
    }
    if n == 0 {
        return Ok(());
    }
    let mut c = vec![0.0; n];
    let mut denom = diag[0];
    for i in 0..n {
        if i > 0 {
            denom = diag[i] - lower[i] * c[i - 1];
            rhs[i] -= lower[i] * rhs[i - 1];
        }
        if denom == 0.0 || !denom.is_finite() {
            return Err(Error::NonFinite(format!("singular tridiagonal pivot at row {i}")));
        }
        c[i] = upper[i] / denom;
        rhs[i] /= denom;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= c[i] * rhs[i + 1];
    }
    Ok(())
}

/// The discrete Laplacian consistent with the solver: spectral in x,
/// second-order central differences in y. Boundary rows are set to zero.
pub fn discrete_laplacian(field: &Field2D) -> Result<Field2D> {
    let grid = *field.grid();
    let (nx, ny) = (grid.nx(), grid.ny());
    let mut planner = FftPlanner::new();
    let forward = planner.plan_fft_forward(nx);
    let inverse = planner.plan_fft_inverse(nx);
    let dy = grid.y(1);
    let inv_nx = 1.0 / nx as f64;
    let mut out = vec![0.0; grid.len()];
    for j in 1..ny - 1 {
        let mut buf = to_complex(field.row(j));
        forward.process(&mut buf);
        for (m, c) in buf.iter_mut().enumerate() {
            let k = wavenumber(m, nx);
            *c *= -k * k;
        }
        inverse.process(&mut buf);
        for i in 0..nx {
            let uyy = (field.at(i, j + 1) - 2.0 * field.at(i, j) + field.at(i, j - 1)) / (dy * dy);
            out[j * nx + i] = buf[i].re * inv_nx + uyy;
        }
    }
    Field2D::new(grid, out)
}
