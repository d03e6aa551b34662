//! Cubic-spline interpolation baselines.
//!
//! Splines use not-a-knot end conditions. Evaluation outside the knot range
//! extends the end-interval cubic, which is how HR points in the half-block
//! margins around the pooled centroids receive a value.

use crate::field::{Field1D, Field2D, Grid1D, Grid2D};
use crate::pool::{PooledCoords, PooledSample};
use crate::spectral::thomas_solve;
use crate::{Error, Result};

/// A piecewise cubic through `(knots, values)`.
///
/// On interval `i`, `s(x) = c0 + c1 t + c2 t² + c3 t³` with `t = x − knots[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spline1D {
    knots: Vec<f64>,
    values: Vec<f64>,
    coeffs: Vec<[f64; 4]>,
}

fn check_knots(xs: &[f64], ys: &[f64], min_len: usize) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidKnots(format!(
            "{} abscissae for {} values",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < min_len {
        return Err(Error::InvalidKnots(format!(
            "need at least {min_len} knots, got {}",
            xs.len()
        )));
    }
    if let Some(i) = xs.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidKnots(format!(
            "knots must be strictly increasing (at index {})",
            i + 1
        )));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spline data".into()));
    }
    Ok(())
}

/// Fit a not-a-knot cubic spline.
pub fn fit_cubic_spline_1d(xs: &[f64], ys: &[f64]) -> Result<Spline1D> {
    check_knots(xs, ys, 4)?;
    let n = xs.len();
    let dx: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
    let slope: Vec<f64> = (0..n - 1).map(|i| (ys[i + 1] - ys[i]) / dx[i]).collect();

    // Solve for the knot derivatives s_i.
    let mut lower = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut upper = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    for i in 1..n - 1 {
        lower[i] = dx[i];
        diag[i] = 2.0 * (dx[i - 1] + dx[i]);
        upper[i] = dx[i - 1];
        rhs[i] = 3.0 * (dx[i] * slope[i - 1] + dx[i - 1] * slope[i]);
    }
    // Third-derivative continuity at the first and last interior knots.
    let d = xs[2] - xs[0];
    diag[0] = dx[1];
    upper[0] = d;
    rhs[0] = ((dx[0] + 2.0 * d) * dx[1] * slope[0] + dx[0] * dx[0] * slope[1]) / d;
    let d = xs[n - 1] - xs[n - 3];
    lower[n - 1] = d;
    diag[n - 1] = dx[n - 3];
    rhs[n - 1] = (dx[n - 2] * dx[n - 2] * slope[n - 3]
        + (2.0 * d + dx[n - 2]) * dx[n - 3] * slope[n - 2])
        / d;
    thomas_solve(&lower, &diag, &upper, &mut rhs)?;
    let s = rhs;

    let coeffs = (0..n - 1)
        .map(|i| {
            let h = dx[i];
            [
                ys[i],
                s[i],
                (3.0 * slope[i] - 2.0 * s[i] - s[i + 1]) / h,
                (s[i] + s[i + 1] - 2.0 * slope[i]) / (h * h),
            ]
        })
        .collect();
    Ok(Spline1D {
        knots: xs.to_vec(),
        values: ys.to_vec(),
        coeffs,
    })
}

impl Spline1D {
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn coefficients(&self) -> &[[f64; 4]] {
        &self.coeffs
    }

    pub fn in_range(&self, x: f64) -> bool {
        x >= self.knots[0] && x <= self.knots[self.knots.len() - 1]
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.knots.len();
        let i = match self.knots.binary_search_by(|k| k.total_cmp(&x)) {
            Ok(i) => return self.values[i],
            Err(0) => 0,
            Err(i) => (i - 1).min(n - 2),
        };
        let t = x - self.knots[i];
        let [c0, c1, c2, c3] = self.coeffs[i];
        c0 + t * (c1 + t * (c2 + t * c3))
    }

    /// Value at `x` plus whether `x` was outside the knot range.
    pub fn eval_flagged(&self, x: f64) -> (f64, bool) {
        (self.eval(x), !self.in_range(x))
    }
}

/// Either interpolant used by the 2D reconstruction.
enum Interp1D {
    Cubic(Spline1D),
    Linear { xs: Vec<f64>, ys: Vec<f64> },
}

impl Interp1D {
    fn fit(xs: &[f64], ys: &[f64]) -> Result<Self> {
        if xs.len() >= 4 {
            Ok(Interp1D::Cubic(fit_cubic_spline_1d(xs, ys)?))
        } else {
            check_knots(xs, ys, 2)?;
            Ok(Interp1D::Linear {
                xs: xs.to_vec(),
                ys: ys.to_vec(),
            })
        }
    }

    fn eval(&self, x: f64) -> f64 {
        match self {
            Interp1D::Cubic(s) => s.eval(x),
            Interp1D::Linear { xs, ys } => {
                let n = xs.len();
                let i = match xs.binary_search_by(|k| k.total_cmp(&x)) {
                    Ok(i) => return ys[i],
                    Err(0) => 0,
                    Err(i) => (i - 1).min(n - 2),
                };
                ys[i] + (ys[i + 1] - ys[i]) * (x - xs[i]) / (xs[i + 1] - xs[i])
            }
        }
    }
}

/// How a reconstruction was produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ReconstructionInfo {
    /// Target points outside the pooled-sample hull.
    pub extrapolated: usize,
    /// A pooled axis had fewer than 4 samples, so linear interpolation was used.
    pub linear_fallback: bool,
}

/// Cubic-spline reconstruction of a 1D pooled sample on `grid`.
pub fn spline_reconstruct_1d(
    sample: &PooledSample,
    grid: &Grid1D,
) -> Result<(Field1D, ReconstructionInfo)> {
    let PooledCoords::OneD(xs) = &sample.coords else {
        return Err(Error::Shape("expected a 1D pooled sample".into()));
    };
    let interp = Interp1D::fit(xs, &sample.values)?;
    let mut info = ReconstructionInfo {
        linear_fallback: matches!(interp, Interp1D::Linear { .. }),
        ..Default::default()
    };
    let targets = grid.coords();
    let (lo, hi) = (xs[0], xs[xs.len() - 1]);
    info.extrapolated = targets.iter().filter(|&&x| x < lo || x > hi).count();
    let values = targets.iter().map(|&x| interp.eval(x)).collect();
    Ok((Field1D::new(*grid, values)?, info))
}

/// Separable bicubic reconstruction at the tensor-product targets
/// `target_xs × target_ys`; the result is row-major `[ys][xs]`.
///
/// Each pooled row is splined along x and evaluated at the target xs, then
/// each resulting column is splined along y.
pub fn bicubic_reconstruct(
    sample: &PooledSample,
    target_xs: &[f64],
    target_ys: &[f64],
) -> Result<(Vec<f64>, ReconstructionInfo)> {
    let PooledCoords::TwoD { xs, ys } = &sample.coords else {
        return Err(Error::Shape("expected a 2D pooled sample".into()));
    };
    let (px, py) = (xs.len(), ys.len());
    if sample.values.len() != px * py {
        return Err(Error::Shape(format!(
            "{} pooled values for a {px}x{py} grid",
            sample.values.len()
        )));
    }
    let (tx, ty) = (target_xs.len(), target_ys.len());
    let mut info = ReconstructionInfo {
        linear_fallback: px < 4 || py < 4,
        ..Default::default()
    };
    let out_x = target_xs.iter().filter(|&&x| x < xs[0] || x > xs[px - 1]).count();
    let out_y = target_ys.iter().filter(|&&y| y < ys[0] || y > ys[py - 1]).count();
    info.extrapolated = tx * ty - (tx - out_x) * (ty - out_y);

    // rows[j][i]: pooled row j evaluated at target x i.
    let mut rows = Vec::with_capacity(py);
    for j in 0..py {
        let interp = Interp1D::fit(xs, &sample.values[j * px..(j + 1) * px])?;
        rows.push(target_xs.iter().map(|&x| interp.eval(x)).collect::<Vec<f64>>());
    }
    let mut out = vec![0.0; tx * ty];
    let mut column = vec![0.0; py];
    for i in 0..tx {
        for j in 0..py {
            column[j] = rows[j][i];
        }
        let interp = Interp1D::fit(ys, &column)?;
        for (jj, &y) in target_ys.iter().enumerate() {
            out[jj * tx + i] = interp.eval(y);
        }
    }
    Ok((out, info))
}

/// Bicubic reconstruction of a pooled sample on every point of `grid`.
pub fn bicubic_reconstruct_2d(
    sample: &PooledSample,
    grid: &Grid2D,
) -> Result<(Field2D, ReconstructionInfo)> {
    let (values, info) = bicubic_reconstruct(sample, &grid.xs(), &grid.ys())?;
    Ok((Field2D::new(*grid, values)?, info))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::pool::{PoolMode, PoolingSpec};

    fn cubic(x: f64) -> f64 {
        0.5 - 1.2 * x + 0.7 * x * x - 0.15 * x * x * x
    }

    #[test]
    fn reproduces_constants() {
        let xs = [0.0, 1.0, 2.5, 3.0, 4.2];
        let s = fit_cubic_spline_1d(&xs, &[2.0; 5]).unwrap();
        for k in 0..=42 {
            assert!((s.eval(k as f64 * 0.1) - 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn reproduces_cubics_off_knot() {
        let xs = [-1.0, -0.3, 0.4, 1.1, 2.0, 2.2, 3.5];
        let ys: Vec<f64> = xs.iter().map(|&x| cubic(x)).collect();
        let s = fit_cubic_spline_1d(&xs, &ys).unwrap();
        for k in 0..=90 {
            let x = -1.0 + k as f64 * 0.05;
            assert!((s.eval(x) - cubic(x)).abs() < 1e-10, "x = {x}");
        }
        // The minimal 4-knot case is the interpolating cubic itself.
        let xs = [0.0, 1.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|&x| cubic(x)).collect();
        let s = fit_cubic_spline_1d(&xs, &ys).unwrap();
        assert!((s.eval(2.0) - cubic(2.0)).abs() < 1e-10);
    }

    #[test]
    fn knot_values_are_exact() {
        let xs = [0.0, 0.7, 1.1, 2.9, 3.3, 5.0];
        let ys = [1.0, -2.0, 0.3, 4.4, -1.1, 0.25];
        let s = fit_cubic_spline_1d(&xs, &ys).unwrap();
        for (x, y) in xs.iter().zip(ys) {
            assert_eq!(s.eval(*x), y);
        }
    }

    #[test]
    fn linear_data_and_extrapolation() {
        let xs = [0.0, 1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x - 1.0).collect();
        let s = fit_cubic_spline_1d(&xs, &ys).unwrap();
        assert!((s.eval(1.5) - 2.0).abs() < 1e-14);
        let (v, outside) = s.eval_flagged(5.0);
        assert!(outside);
        assert!((v - 9.0).abs() < 1e-12);
        let (_, outside) = s.eval_flagged(2.5);
        assert!(!outside);
        // Beyond the last knot the end cubic is extended.
        let ys: Vec<f64> = xs.iter().map(|&x| cubic(x)).collect();
        let s = fit_cubic_spline_1d(&xs, &ys).unwrap();
        let [c0, c1, c2, c3] = s.coefficients()[3];
        let t = 5.5 - 3.0;
        assert!((s.eval(5.5) - (c0 + c1 * t + c2 * t * t + c3 * t * t * t)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_knots() {
        assert!(fit_cubic_spline_1d(&[0.0, 1.0, 2.0], &[0.0; 3]).is_err());
        assert!(fit_cubic_spline_1d(&[0.0, 1.0, 1.0, 2.0], &[0.0; 4]).is_err());
        assert!(fit_cubic_spline_1d(&[0.0, 2.0, 1.0, 3.0], &[0.0; 4]).is_err());
        assert!(fit_cubic_spline_1d(&[0.0, 1.0, 2.0, 3.0], &[0.0; 3]).is_err());
    }

    fn sample_2d(xs: Vec<f64>, ys: Vec<f64>, f: impl Fn(f64, f64) -> f64) -> PooledSample {
        let mut values = Vec::new();
        for &y in &ys {
            for &x in &xs {
                values.push(f(x, y));
            }
        }
        PooledSample {
            dims: vec![xs.len(), ys.len()],
            values,
            coords: PooledCoords::TwoD { xs, ys },
            spec: PoolingSpec::new(PoolMode::Average, 1).unwrap(),
            source_id: 0,
        }
    }

    fn bicubic_poly(x: f64, y: f64) -> f64 {
        let px = [0.3, -1.0, 0.4, 0.2];
        let py = [1.0, 0.5, -0.3, 0.1];
        let mut s = 0.0;
        for (a, ca) in px.iter().enumerate() {
            for (b, cb) in py.iter().enumerate() {
                s += ca * cb * (1.0 + 0.1 * (a + b) as f64) * x.powi(a as i32) * y.powi(b as i32);
            }
        }
        s
    }

    #[test]
    fn bicubic_reproduces_polynomial_surfaces() {
        let g = Grid2D::new(64, 64).unwrap();
        let crate::pool::PooledCoords::TwoD { xs, ys } = crate::pool::pooled_coords_2d(&g, 8).unwrap() else {
            unreachable!()
        };
        let s = sample_2d(xs, ys, bicubic_poly);
        let (field, info) = bicubic_reconstruct_2d(&s, &g).unwrap();
        assert!(!info.linear_fallback);
        assert!(info.extrapolated > 0);
        for j in 0..g.ny() {
            for i in 0..g.nx() {
                let e = (field.at(i, j) - bicubic_poly(g.x(i), g.y(j))).abs();
                assert!(e < 1e-8, "error {e} at ({i},{j})");
            }
        }
    }

    #[test]
    fn bicubic_constant_and_knots() {
        let xs = vec![0.1, 0.5, 0.9, 1.3, 1.7];
        let ys = vec![0.2, 0.6, 1.0, 1.4];
        let s = sample_2d(xs.clone(), ys.clone(), |_, _| -4.0);
        let (out, _) = bicubic_reconstruct(&s, &[0.0, 0.33, 2.0], &[0.0, 1.5]).unwrap();
        assert!(out.iter().all(|v| (v + 4.0).abs() < 1e-13));
        let s = sample_2d(xs.clone(), ys.clone(), |x, y| (3.0 * x).sin() + y * y * y);
        let (out, info) = bicubic_reconstruct(&s, &xs, &ys).unwrap();
        assert_eq!(out, s.values);
        assert_eq!(info.extrapolated, 0);
    }

    #[test]
    fn small_pooled_grid_falls_back_to_linear() {
        let s = sample_2d(vec![0.0, 1.0, 2.0], vec![0.0, 1.0, 2.0, 3.0], |x, y| x + 2.0 * y);
        let (out, info) = bicubic_reconstruct(&s, &[0.5, 1.5], &[0.5, 2.5]).unwrap();
        assert!(info.linear_fallback);
        let expect = [1.5, 2.5, 5.5, 6.5];
        for (o, e) in out.iter().zip(expect) {
            assert!((o - e).abs() < 1e-13);
        }
    }

    #[test]
    fn reconstruct_1d_on_grid() {
        let g = Grid1D::new(32, 0.0, 10.0, true).unwrap();
        let xs = crate::pool::pooled_coords_1d(&g, 4).unwrap();
        let sample = PooledSample {
            values: xs.iter().map(|&x| cubic(x / 5.0)).collect(),
            dims: vec![xs.len()],
            coords: PooledCoords::OneD(xs),
            spec: PoolingSpec::new(PoolMode::Max, 4).unwrap(),
            source_id: 3,
        };
        let (f, info) = spline_reconstruct_1d(&sample, &g).unwrap();
        assert!(info.extrapolated > 0 && !info.linear_fallback);
        for (x, v) in g.coords().iter().zip(f.values()) {
            assert!((v - cubic(x / 5.0)).abs() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn spline_is_linear_in_data(a in proptest::collection::vec(-5.0..5.0f64, 8), b in proptest::collection::vec(-5.0..5.0f64, 8), alpha in -2.0..2.0f64, beta in -2.0..2.0f64) {
            let xs: Vec<f64> = (0..8).map(|i| i as f64 * 0.7).collect();
            let combo: Vec<f64> = a.iter().zip(&b).map(|(x, y)| alpha * x + beta * y).collect();
            let sa = fit_cubic_spline_1d(&xs, &a).unwrap();
            let sb = fit_cubic_spline_1d(&xs, &b).unwrap();
            let sc = fit_cubic_spline_1d(&xs, &combo).unwrap();
            for k in 0..60 {
                let x = -0.3 + k as f64 * 0.09;
                let e = sc.eval(x) - (alpha * sa.eval(x) + beta * sb.eval(x));
                prop_assert!(e.abs() < 1e-10);
            }
        }

        #[test]
        fn interpolates_at_all_knots(ys in proptest::collection::vec(-5.0..5.0f64, 4..20)) {
            let xs: Vec<f64> = (0..ys.len()).map(|i| (i as f64).powf(1.3)).collect();
            let s = fit_cubic_spline_1d(&xs, &ys).unwrap();
            for (x, y) in xs.iter().zip(&ys) {
                prop_assert!((s.eval(*x) - y).abs() <= 1e-12);
            }
        }
    }
}
