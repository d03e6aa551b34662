use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::{mode_index, to_complex};
use crate::field::{Field1D, Grid1D};
use crate::{seed, Error, Result};

pub const VISC_RANGE: (f64, f64) = (1e-4, 6e-4);
pub const DISP_RANGE: (f64, f64) = (1.5e-4, 2.5e-4);
pub const SOLITON_RANGE: (i32, i32) = (-90, 110);

/// Physical parameters of one KdV-Burgers instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KdvbParams {
    /// Diffusion coefficient multiplying `u_xx`.
    pub visc_a: f64,
    /// Dispersion coefficient multiplying `u_xxx`.
    pub disp_b: f64,
    /// Steepness parameter of the initial profile; never zero.
    pub soliton_n: i32,
    pub seed: u64,
}

/// Draw parameters uniformly from the generation ranges.
pub fn sample_kdvb_params(rng_seed: u64) -> KdvbParams {
    let mut rng = seed::rng(rng_seed);
    let visc_a = rng.gen_range(VISC_RANGE.0..=VISC_RANGE.1);
    let disp_b = rng.gen_range(DISP_RANGE.0..=DISP_RANGE.1);
    let soliton_n = loop {
        let n = rng.gen_range(SOLITON_RANGE.0..=SOLITON_RANGE.1);
        if n != 0 {
            break n;
        }
    };
    KdvbParams {
        visc_a,
        disp_b,
        soliton_n,
        seed: rng_seed,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KdvbSolverConfig {
    pub n_grid: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub dt: f64,
    pub t_final: f64,
    pub dealias: bool,
}

impl Default for KdvbSolverConfig {
    fn default() -> Self {
        Self {
            n_grid: 1024,
            x_min: 0.0,
            x_max: 10.0,
            dt: 2.5e-4,
            t_final: 1.0,
            dealias: true,
        }
    }
}

impl KdvbSolverConfig {
    pub fn with_grid(n_grid: usize) -> Self {
        Self {
            n_grid,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.n_grid.is_power_of_two() || self.n_grid < 8 {
            return Err(Error::InvalidParameter(format!(
                "n_grid must be a power of two >= 8, got {}",
                self.n_grid
            )));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "t_final must be positive, got {}",
                self.t_final
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid1D> {
        Grid1D::new(self.n_grid, self.x_min, self.x_max, true)
    }
}

/// `ln cosh t` without overflow.
fn ln_cosh(t: f64) -> f64 {
    let a = t.abs();
    a - std::f64::consts::LN_2 + (-2.0 * a).exp().ln_1p()
}

/// `ln(1 + e^z)` without overflow.
fn ln1p_exp(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `u(x, 0) = (1/2n) ln(1 + cosh²(n) / cosh²(n (x − 2)))`.
pub fn kdvb_initial_condition(grid: &Grid1D, n: i32) -> Result<Field1D> {
    if n == 0 {
        return Err(Error::InvalidParameter("soliton_n must be nonzero".into()));
    }
    let nf = n as f64;
    let lc_n = ln_cosh(nf);
    Field1D::from_fn(*grid, |x| {
        let z = 2.0 * (lc_n - ln_cosh(nf * (x - 2.0)));
        ln1p_exp(z) / (2.0 * nf)
    })
}

/// Spectral operators for one periodic grid, planned once per solve.
struct SpectralOps {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    /// `i k` with the Nyquist bin zeroed.
    ik: Vec<Complex64>,
    /// 2/3-rule mask.
    keep: Vec<bool>,
    dealias: bool,
}

impl SpectralOps {
    fn new(grid: &Grid1D, dealias: bool) -> Self {
        let n = grid.n_points();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(n);
        let inverse = planner.plan_fft_inverse(n);
        let scale = 2.0 * PI / grid.length();
        let ik = (0..n)
            .map(|j| {
                if n.is_multiple_of(2) && j == n / 2 {
                    Complex64::new(0.0, 0.0)
                } else {
                    Complex64::new(0.0, scale * mode_index(j, n) as f64)
                }
            })
            .collect();
        let keep = (0..n)
            .map(|j| 3 * mode_index(j, n).unsigned_abs() < n as u64)
            .collect();
        Self {
            n,
            forward,
            inverse,
            ik,
            keep,
            dealias,
        }
    }

    fn wavenumber(&self, j: usize, length: f64) -> f64 {
        2.0 * PI / length * mode_index(j, self.n) as f64
    }

    fn filter(&self, buf: &mut [Complex64]) {
        if self.dealias {
            for (c, &k) in buf.iter_mut().zip(&self.keep) {
                if !k {
                    *c = Complex64::new(0.0, 0.0);
                }
            }
        }
    }

    /// Spectral coefficients of `−½ ∂x(u²)` from spectral coefficients of `u`.
    fn nonlinear(&self, u_hat: &[Complex64], out: &mut Vec<Complex64>) {
        out.clear();
        out.extend_from_slice(u_hat);
        self.filter(out);
        self.inverse.process(out);
        let inv_n = 1.0 / self.n as f64;
        for c in out.iter_mut() {
            let u = c.re * inv_n;
            *c = Complex64::new(u * u, 0.0);
        }
        self.forward.process(out);
        self.filter(out);
        for (c, ik) in out.iter_mut().zip(&self.ik) {
            *c = -0.5 * *c * ik;
        }
        out[0] = Complex64::new(0.0, 0.0);
    }

    fn to_physical(&self, u_hat: &[Complex64]) -> Vec<f64> {
        let mut buf = u_hat.to_vec();
        self.inverse.process(&mut buf);
        let inv_n = 1.0 / self.n as f64;
        buf.iter().map(|c| c.re * inv_n).collect()
    }
}

/// `−½ ∂x(u²)` evaluated pseudospectrally with 2/3-rule dealiasing.
pub fn kdvb_rhs_nonlinear(state: &Field1D) -> Result<Field1D> {
    let grid = state.grid();
    if !grid.periodic() {
        return Err(Error::InvalidGrid(
            "nonlinear term needs a periodic grid".into(),
        ));
    }
    let ops = SpectralOps::new(grid, true);
    let mut u_hat = to_complex(state.values());
    ops.forward.process(&mut u_hat);
    let mut out = Vec::with_capacity(ops.n);
    ops.nonlinear(&u_hat, &mut out);
    Field1D::new(*grid, ops.to_physical(&out))
}

/// Integrate `u_t + u u_x − b u_xxx = a u_xx` from the initial profile.
///
/// The linear part is propagated exactly by its Fourier-space integrating
/// factor; the nonlinear term is advanced with Heun's method on top of it.
pub fn solve_kdvb(params: &KdvbParams, config: &KdvbSolverConfig) -> Result<Field1D> {
    let grid = config.grid()?;
    let initial = kdvb_initial_condition(&grid, params.soliton_n)?;
    solve_kdvb_from(&initial, params.visc_a, params.disp_b, config)
}

/// Same integrator from an arbitrary periodic initial state.
pub fn solve_kdvb_from(
    initial: &Field1D,
    visc_a: f64,
    disp_b: f64,
    config: &KdvbSolverConfig,
) -> Result<Field1D> {
    config.validate()?;
    let grid = *initial.grid();
    if !grid.periodic() {
        return Err(Error::InvalidGrid("KdV-Burgers needs a periodic grid".into()));
    }
    let ops = SpectralOps::new(&grid, config.dealias);
    let n = ops.n;
    let n_steps = (config.t_final / config.dt - 1e-9).ceil().max(1.0) as usize;
    let dt = config.t_final / n_steps as f64;

    // exp(dt L) with L(k) = −a k² − i b k³ (dispersion dropped at Nyquist).
    let propagator: Vec<Complex64> = (0..n)
        .map(|j| {
            let k = ops.wavenumber(j, grid.length());
            let disp = if n.is_multiple_of(2) && j == n / 2 { 0.0 } else { disp_b * k * k * k };
            Complex64::new(-visc_a * k * k, -disp).scale(dt).exp()
        })
        .collect();

    let mut u_hat = to_complex(initial.values());
    ops.forward.process(&mut u_hat);
    let mut n1 = Vec::with_capacity(n);
    let mut n2 = Vec::with_capacity(n);
    let mut stage = vec![Complex64::new(0.0, 0.0); n];

    for step in 0..n_steps {
        ops.nonlinear(&u_hat, &mut n1);
        for j in 0..n {
            stage[j] = propagator[j] * (u_hat[j] + dt * n1[j]);
        }
        ops.nonlinear(&stage, &mut n2);
        for j in 0..n {
            u_hat[j] = propagator[j] * (u_hat[j] + 0.5 * dt * n1[j]) + 0.5 * dt * n2[j];
        }
        if u_hat.iter().any(|c| !(c.re.is_finite() && c.im.is_finite())) {
            return Err(Error::Unstable {
                step: step + 1,
                time: (step + 1) as f64 * dt,
                detail: "non-finite spectral coefficient".into(),
            });
        }
    }
    let values = ops.to_physical(&u_hat);
    Field1D::new(grid, values).map_err(|e| Error::Unstable {
        step: n_steps,
        time: config.t_final,
        detail: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::l2_norm;

    fn grid(n: usize) -> Grid1D {
        Grid1D::new(n, 0.0, 10.0, true).unwrap()
    }

    #[test]
    fn params_in_range_and_deterministic() {
        for s in 0..500u64 {
            let p = sample_kdvb_params(s);
            assert!((VISC_RANGE.0..=VISC_RANGE.1).contains(&p.visc_a));
            assert!((DISP_RANGE.0..=DISP_RANGE.1).contains(&p.disp_b));
            assert!((SOLITON_RANGE.0..=SOLITON_RANGE.1).contains(&p.soliton_n));
            assert_ne!(p.soliton_n, 0);
            assert_eq!(p, sample_kdvb_params(s));
        }
    }

    #[test]
    fn initial_condition_peak_and_symmetry() {
        let g = Grid1D::new(1001, 0.0, 10.0, false).unwrap();
        for n in [-90, -3, 1, 7, 100] {
            let u = kdvb_initial_condition(&g, n).unwrap();
            // x = 2 sits at index 200.
            let nf = n as f64;
            let expect = (1.0 + nf.cosh().powi(2)).ln() / (2.0 * nf);
            if nf.abs() < 300.0 && nf.cosh().is_finite() {
                assert!((u.values()[200] - expect).abs() < 1e-12 * expect.abs().max(1.0));
            }
            for d in 1..=200 {
                let (a, b) = (u.values()[200 + d], u.values()[200 - d]);
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300) + 1e-300, "n={n} d={d}");
            }
        }
    }

    #[test]
    fn initial_condition_large_n_value() {
        // ln(1 + cosh²100) / 200 with ln cosh 100 = 100 − ln 2 + ln(1 + e^−200).
        let lc = 100.0 - std::f64::consts::LN_2;
        let expect = (2.0 * lc) / 200.0;
        let g = Grid1D::new(11, 0.0, 10.0, false).unwrap();
        let u = kdvb_initial_condition(&g, 100).unwrap();
        assert!((u.values()[2] - expect).abs() < 1e-12);
        assert!((u.values()[2] - 0.9931).abs() < 5e-5);
        assert!(u.values().iter().all(|v| v.is_finite()));
        assert!(kdvb_initial_condition(&g, 0).is_err());
    }

    #[test]
    fn nonlinear_term_of_constant_is_zero() {
        let u = Field1D::from_fn(grid(64), |_| 3.5).unwrap();
        let r = kdvb_rhs_nonlinear(&u).unwrap();
        assert!(r.values().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn nonlinear_term_matches_analytic_derivative() {
        let g = grid(128);
        let w = 2.0 * PI / 10.0;
        let u = Field1D::from_fn(g, |x| (w * x).sin()).unwrap();
        let r = kdvb_rhs_nonlinear(&u).unwrap();
        for (x, v) in g.coords().into_iter().zip(r.values()) {
            let exact = -w * (w * x).sin() * (w * x).cos();
            assert!((v - exact).abs() < 1e-10, "x={x}: {v} vs {exact}");
        }
        assert!(r.mean().abs() < 1e-14);
    }

    #[test]
    fn nonlinear_term_rejects_non_periodic() {
        let g = Grid1D::new(16, 0.0, 10.0, false).unwrap();
        let u = Field1D::from_fn(g, |x| x).unwrap();
        assert!(kdvb_rhs_nonlinear(&u).is_err());
    }

    #[test]
    fn constant_state_is_stationary() {
        let cfg = KdvbSolverConfig {
            n_grid: 64,
            t_final: 0.1,
            ..KdvbSolverConfig::default()
        };
        let u0 = Field1D::from_fn(cfg.grid().unwrap(), |_| 0.7).unwrap();
        let u = solve_kdvb_from(&u0, 4e-4, 2e-4, &cfg).unwrap();
        assert!(u.values().iter().all(|v| (v - 0.7).abs() < 1e-13));
    }

    #[test]
    fn mean_is_conserved() {
        let cfg = KdvbSolverConfig {
            n_grid: 256,
            t_final: 0.5,
            ..KdvbSolverConfig::default()
        };
        let p = sample_kdvb_params(11);
        let u0 = kdvb_initial_condition(&cfg.grid().unwrap(), p.soliton_n).unwrap();
        let u = solve_kdvb(&p, &cfg).unwrap();
        let drift = (u.mean() - u0.mean()).abs() / u0.mean().abs().max(1.0);
        assert!(drift < 1e-10, "drift {drift}");
    }

    #[test]
    fn solve_is_deterministic() {
        let cfg = KdvbSolverConfig {
            n_grid: 64,
            t_final: 0.05,
            ..KdvbSolverConfig::default()
        };
        let p = sample_kdvb_params(3);
        assert_eq!(solve_kdvb(&p, &cfg).unwrap(), solve_kdvb(&p, &cfg).unwrap());
    }

    #[test]
    fn temporal_order_is_two() {
        let base = KdvbSolverConfig {
            n_grid: 128,
            t_final: 0.4,
            dt: 4e-3,
            ..KdvbSolverConfig::default()
        };
        let p = KdvbParams {
            visc_a: 4e-4,
            disp_b: 2e-4,
            soliton_n: 2,
            seed: 0,
        };
        let run = |dt: f64| solve_kdvb(&p, &KdvbSolverConfig { dt, ..base }).unwrap();
        let (u1, u2, u3) = (run(4e-3), run(2e-3), run(1e-3));
        let d12: Vec<f64> = u1.values().iter().zip(u2.values()).map(|(a, b)| a - b).collect();
        let d23: Vec<f64> = u2.values().iter().zip(u3.values()).map(|(a, b)| a - b).collect();
        let order = (l2_norm(&d12).unwrap() / l2_norm(&d23).unwrap()).log2();
        assert!((order - 2.0).abs() < 0.3, "observed order {order}");
    }

    #[test]
    fn instability_is_reported() {
        let cfg = KdvbSolverConfig {
            n_grid: 64,
            t_final: 5.0,
            dt: 0.5,
            dealias: false,
            ..KdvbSolverConfig::default()
        };
        let u0 = Field1D::from_fn(cfg.grid().unwrap(), |x| 50.0 * (x * 2.0).sin()).unwrap();
        match solve_kdvb_from(&u0, 1e-4, 2e-4, &cfg) {
            Err(Error::Unstable { step, .. }) => assert!(step >= 1),
            other => panic!("expected instability, got {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        assert!(KdvbSolverConfig::with_grid(100).validate().is_err());
        assert!(KdvbSolverConfig { dt: 0.0, ..Default::default() }.validate().is_err());
        assert!(KdvbSolverConfig { t_final: -1.0, ..Default::default() }.validate().is_err());
        assert!(KdvbSolverConfig::default().validate().is_ok());
    }
}
