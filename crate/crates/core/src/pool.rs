//! Block pooling of high-resolution fields into low-resolution inputs.
//!
//! Windows are non-overlapping `M`-blocks (`M × M` in 2D). Every pooled
//! sample is placed at the centroid of its block's coordinates, for both
//! pooling modes.

use std::fmt;
use std::str::FromStr;

use crate::field::{Field, Field1D, Field2D, Grid1D, Grid2D};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolMode {
    Average,
    Max,
}

impl PoolMode {
    pub const ALL: [PoolMode; 2] = [PoolMode::Average, PoolMode::Max];

    pub fn name(self) -> &'static str {
        match self {
            PoolMode::Average => "avg",
            PoolMode::Max => "max",
        }
    }
}

impl fmt::Display for PoolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" | "average" => Ok(PoolMode::Average),
            "max" => Ok(PoolMode::Max),
            other => Err(Error::InvalidParameter(format!(
                "unknown pooling mode '{other}' (expected avg or max)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PoolingSpec {
    pub mode: PoolMode,
    pub window: usize,
}

impl PoolingSpec {
    pub fn new(mode: PoolMode, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::InvalidParameter("pooling window must be >= 1".into()));
        }
        Ok(Self { mode, window })
    }

    /// Check that the window divides every resolution in `dims`.
    pub fn check(&self, dims: &[usize]) -> Result<()> {
        for &d in dims {
            if self.window == 0 || d % self.window != 0 {
                return Err(Error::PoolWindow {
                    window: self.window,
                    resolution: d,
                });
            }
        }
        Ok(())
    }

    /// Pooled resolution per dimension.
    pub fn pooled_dims(&self, dims: &[usize]) -> Result<Vec<usize>> {
        self.check(dims)?;
        Ok(dims.iter().map(|d| d / self.window).collect())
    }
}

/// Centroids of pooled samples, per axis.
#[derive(Clone, Debug, PartialEq)]
pub enum PooledCoords {
    OneD(Vec<f64>),
    TwoD { xs: Vec<f64>, ys: Vec<f64> },
}

impl PooledCoords {
    pub fn len(&self) -> usize {
        match self {
            PooledCoords::OneD(xs) => xs.len(),
            PooledCoords::TwoD { xs, ys } => xs.len() * ys.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A low-resolution sample derived from one high-resolution snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledSample {
    /// Row-major `[ny][nx]` in 2D.
    pub values: Vec<f64>,
    /// Pooled resolution, x first.
    pub dims: Vec<usize>,
    pub coords: PooledCoords,
    pub spec: PoolingSpec,
    pub source_id: usize,
}

fn block_centroids(coords: &[f64], window: usize) -> Vec<f64> {
    coords
        .chunks(window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .collect()
}

/// Block-centroid coordinates of the pooled samples of a 1D grid.
pub fn pooled_coords_1d(grid: &Grid1D, window: usize) -> Result<Vec<f64>> {
    PoolingSpec::new(PoolMode::Average, window)?.check(&[grid.n_points()])?;
    Ok(block_centroids(&grid.coords(), window))
}

/// Block-centroid coordinates of the pooled samples of a 2D grid.
pub fn pooled_coords_2d(grid: &Grid2D, window: usize) -> Result<PooledCoords> {
    PoolingSpec::new(PoolMode::Average, window)?.check(&[grid.nx(), grid.ny()])?;
    Ok(PooledCoords::TwoD {
        xs: block_centroids(&grid.xs(), window),
        ys: block_centroids(&grid.ys(), window),
    })
}

fn reduce(block: impl Iterator<Item = f64>, mode: PoolMode, count: usize) -> f64 {
    match mode {
        PoolMode::Average => block.sum::<f64>() / count as f64,
        PoolMode::Max => block.fold(f64::NEG_INFINITY, f64::max),
    }
}

fn pool_1d(field: &Field1D, spec: PoolingSpec) -> Result<(Vec<f64>, Vec<usize>, PooledCoords)> {
    let m = spec.window;
    let coords = pooled_coords_1d(field.grid(), m)?;
    let values = field
        .values()
        .chunks(m)
        .map(|c| reduce(c.iter().copied(), spec.mode, m))
        .collect::<Vec<_>>();
    Ok((values, vec![coords.len()], PooledCoords::OneD(coords)))
}

fn pool_2d(field: &Field2D, spec: PoolingSpec) -> Result<(Vec<f64>, Vec<usize>, PooledCoords)> {
    let m = spec.window;
    let coords = pooled_coords_2d(field.grid(), m)?;
    let (nx, ny) = (field.grid().nx(), field.grid().ny());
    let (px, py) = (nx / m, ny / m);
    let mut values = Vec::with_capacity(px * py);
    for bj in 0..py {
        for bi in 0..px {
            let block = (0..m).flat_map(|s| {
                let row = field.row(bj * m + s);
                row[bi * m..(bi + 1) * m].iter().copied()
            });
            values.push(reduce(block, spec.mode, m * m));
        }
    }
    Ok((values, vec![px, py], coords))
}

/// Pool `field` according to `spec`.
pub fn pool(field: &Field, spec: PoolingSpec, source_id: usize) -> Result<PooledSample> {
    let (values, dims, coords) = match field {
        Field::OneD(f) => pool_1d(f, spec)?,
        Field::TwoD(f) => pool_2d(f, spec)?,
    };
    Ok(PooledSample {
        values,
        dims,
        coords,
        spec,
        source_id,
    })
}

pub fn pool_avg(field: &Field, window: usize) -> Result<PooledSample> {
    pool(field, PoolingSpec::new(PoolMode::Average, window)?, 0)
}

pub fn pool_max(field: &Field, window: usize) -> Result<PooledSample> {
    pool(field, PoolingSpec::new(PoolMode::Max, window)?, 0)
}
