//! Uniform grids, sampled scalar fields and the relative L2 metric.

use std::f64::consts::PI;

use crate::{Error, Result};

/// A uniform 1D grid.
///
/// Periodic grids exclude the right endpoint, non-periodic grids include it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid1D {
    n_points: usize,
    x_min: f64,
    x_max: f64,
    periodic: bool,
}

impl Grid1D {
    pub fn new(n_points: usize, x_min: f64, x_max: f64, periodic: bool) -> Result<Self> {
        if n_points < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least 2 points, got {n_points}"
            )));
        }
        if !(x_min.is_finite() && x_max.is_finite()) || x_max <= x_min {
            return Err(Error::InvalidGrid(format!(
                "non-positive span [{x_min}, {x_max}]"
            )));
        }
        Ok(Self {
            n_points,
            x_min,
            x_max,
            periodic,
        })
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn periodic(&self) -> bool {
        self.periodic
    }

    pub fn length(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn spacing(&self) -> f64 {
        if self.periodic {
            self.length() / self.n_points as f64
        } else {
            self.length() / (self.n_points - 1) as f64
        }
    }

    pub fn coord(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.spacing()
    }

    pub fn coords(&self) -> Vec<f64> {
        (0..self.n_points).map(|i| self.coord(i)).collect()
    }
}

/// The 2D grid on `[0, π] × [0, π]`: periodic in x, endpoints included in y.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid2D {
    nx: usize,
    ny: usize,
}

impl Grid2D {
    pub fn new(nx: usize, ny: usize) -> Result<Self> {
        if nx < 4 || ny < 3 {
            return Err(Error::InvalidGrid(format!(
                "2D grid needs nx >= 4 and ny >= 3, got {nx}x{ny}"
            )));
        }
        Ok(Self { nx, ny })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn x_axis(&self) -> Grid1D {
        Grid1D {
            n_points: self.nx,
            x_min: 0.0,
            x_max: PI,
            periodic: true,
        }
    }

    pub fn y_axis(&self) -> Grid1D {
        Grid1D {
            n_points: self.ny,
            x_min: 0.0,
            x_max: PI,
            periodic: false,
        }
    }

    pub fn x(&self, i: usize) -> f64 {
        i as f64 * PI / self.nx as f64
    }

    pub fn y(&self, j: usize) -> f64 {
        j as f64 * PI / (self.ny - 1) as f64
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.nx).map(|i| self.x(i)).collect()
    }

    pub fn ys(&self) -> Vec<f64> {
        (0..self.ny).map(|j| self.y(j)).collect()
    }
}

/// Samples of a scalar function on a [`Grid1D`].
#[derive(Clone, Debug, PartialEq)]
pub struct Field1D {
    grid: Grid1D,
    values: Vec<f64>,
}

impl Field1D {
    pub fn new(grid: Grid1D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_points() {
            return Err(Error::Shape(format!(
                "field has {} values for a {}-point grid",
                values.len(),
                grid.n_points()
            )));
        }
        check_finite(&values)?;
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: Grid1D, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values = grid.coords().into_iter().map(f).collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &Grid1D {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Samples on a [`Grid2D`], stored row-major as `[ny][nx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Field2D {
    grid: Grid2D,
    values: Vec<f64>,
}

impl Field2D {
    pub fn new(grid: Grid2D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape(format!(
                "field has {} values for a {}x{} grid",
                values.len(),
                grid.nx(),
                grid.ny()
            )));
        }
        check_finite(&values)?;
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: Grid2D, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(grid.len());
        for j in 0..grid.ny() {
            let y = grid.y(j);
            for i in 0..grid.nx() {
                values.push(f(grid.x(i), y));
            }
        }
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &Grid2D {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.grid.nx() + i]
    }

    pub fn row(&self, j: usize) -> &[f64] {
        let nx = self.grid.nx();
        &self.values[j * nx..(j + 1) * nx]
    }
}

/// Either kind of sampling grid.
#[derive(Clone, Debug, PartialEq)]
pub enum Grid {
    OneD(Grid1D),
    TwoD(Grid2D),
}

impl Grid {
    pub fn ndim(&self) -> usize {
        match self {
            Grid::OneD(_) => 1,
            Grid::TwoD(_) => 2,
        }
    }

    /// Resolution per dimension, x first.
    pub fn dims(&self) -> Vec<usize> {
        match self {
            Grid::OneD(g) => vec![g.n_points()],
            Grid::TwoD(g) => vec![g.nx(), g.ny()],
        }
    }

    pub fn len(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Coordinates of point `k` in storage order (row-major `[ny][nx]` in 2D).
    pub fn point(&self, k: usize) -> Vec<f64> {
        match self {
            Grid::OneD(g) => vec![g.coord(k)],
            Grid::TwoD(g) => vec![g.x(k % g.nx()), g.y(k / g.nx())],
        }
    }

    /// Domain bounds per dimension, x first.
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        match self {
            Grid::OneD(g) => vec![(g.x_min(), g.x_max())],
            Grid::TwoD(g) => {
                let (x, y) = (g.x_axis(), g.y_axis());
                vec![(x.x_min(), x.x_max()), (y.x_min(), y.x_max())]
            }
        }
    }

    /// Wrap values laid out in storage order.
    pub fn field(&self, values: Vec<f64>) -> Result<Field> {
        Ok(match self {
            Grid::OneD(g) => Field::OneD(Field1D::new(*g, values)?),
            Grid::TwoD(g) => Field::TwoD(Field2D::new(*g, values)?),
        })
    }
}

/// Either kind of sampled field, as stored in datasets.
#[derive(Clone, Debug, PartialEq)]
pub enum Field {
    OneD(Field1D),
    TwoD(Field2D),
}

impl Field {
    pub fn values(&self) -> &[f64] {
        match self {
            Field::OneD(f) => f.values(),
            Field::TwoD(f) => f.values(),
        }
    }

    /// Resolution per dimension, x first.
    pub fn dims(&self) -> Vec<usize> {
        match self {
            Field::OneD(f) => vec![f.grid().n_points()],
            Field::TwoD(f) => vec![f.grid().nx(), f.grid().ny()],
        }
    }

    pub fn grid(&self) -> Grid {
        match self {
            Field::OneD(f) => Grid::OneD(*f.grid()),
            Field::TwoD(f) => Grid::TwoD(*f.grid()),
        }
    }

    pub fn same_grid(&self, other: &Field) -> bool {
        match (self, other) {
            (Field::OneD(a), Field::OneD(b)) => a.grid() == b.grid(),
            (Field::TwoD(a), Field::TwoD(b)) => a.grid() == b.grid(),
            _ => false,
        }
    }
}

impl From<Field1D> for Field {
    fn from(f: Field1D) -> Self {
        Field::OneD(f)
    }
}

impl From<Field2D> for Field {
    fn from(f: Field2D) -> Self {
        Field::TwoD(f)
    }
}

pub(crate) fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!(
            "entry {i} is {}",
            values[i]
        ))),
        None => Ok(()),
    }
}

/// Euclidean norm.
pub fn l2_norm(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("l2_norm of an empty array"));
    }
    // Scaled accumulation keeps the sum of squares in range for large inputs.
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Ok(0.0);
    }
    if !scale.is_finite() {
        return Err(Error::NonFinite("l2_norm input".into()));
    }
    let sum: f64 = values.iter().map(|v| (v / scale) * (v / scale)).sum();
    Ok(scale * sum.sqrt())
}

/// `‖reference − prediction‖₂ / ‖reference‖₂` over raw value arrays.
pub fn relative_l2(reference: &[f64], prediction: &[f64]) -> Result<f64> {
    if reference.len() != prediction.len() {
        return Err(Error::GridMismatch);
    }
    let denom = l2_norm(reference)?;
    if denom == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let diff: Vec<f64> = reference
        .iter()
        .zip(prediction)
        .map(|(r, p)| r - p)
        .collect();
    Ok(l2_norm(&diff)? / denom)
}

/// Relative L2 error of `prediction` against `reference` on the same grid.
pub fn relative_l2_error(reference: &Field, prediction: &Field) -> Result<f64> {
    if !reference.same_grid(prediction) {
        return Err(Error::GridMismatch);
    }
    relative_l2(reference.values(), prediction.values())
}
