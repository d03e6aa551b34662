use super::{mse_loss, Gradients, Matrix, Sequential};
use crate::seed;
use crate::Result;
use rand::seq::index::sample;

/// A scalar function of a parameter set with an analytic gradient.
pub trait Objective {
    fn params_mut(&mut self) -> Vec<&mut [f64]>;
    fn loss(&self) -> Result<f64>;
    fn loss_and_grad(&self) -> Result<(f64, Gradients)>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step, multiplied by `max(1, |θ|)`.
    pub step: f64,
    /// Lower bound on the denominator of the relative error.
    pub floor: f64,
    /// Per-tensor cap on the number of checked entries; `None` checks all.
    pub max_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-6,
            floor: 1e-3,
            max_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Largest relative error per parameter tensor.
    pub per_tensor: Vec<f64>,
    pub checked: usize,
    /// `(tensor, index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare analytic gradients to central finite differences.
pub fn grad_check<O: Objective + ?Sized>(
    objective: &mut O,
    config: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let (_, analytic) = objective.loss_and_grad()?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_tensor: vec![0.0; analytic.len()],
        checked: 0,
        worst: None,
    };
    for (t, grad) in analytic.iter().enumerate() {
        let n = grad.len();
        let indices: Vec<usize> = match config.max_per_tensor {
            Some(cap) if cap < n => {
                let mut rng = seed::rng_for(config.seed, &[t as u64]);
                let mut idx = sample(&mut rng, n, cap).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        };
        for i in indices {
            let orig = objective.params_mut()[t][i];
            let h = config.step * orig.abs().max(1.0);
            objective.params_mut()[t][i] = orig + h;
            let up = objective.loss()?;
            objective.params_mut()[t][i] = orig - h;
            let down = objective.loss()?;
            objective.params_mut()[t][i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(grad[i], numeric, config.floor);
            report.checked += 1;
            if err > report.per_tensor[t] {
                report.per_tensor[t] = err;
            }
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((t, i));
            }
        }
    }
    Ok(report)
}

/// MSE of a [`Sequential`] network on a fixed batch.
///
/// With `train` set, batch-norm layers use batch statistics, matching the
/// gradient path used during training.
#[derive(Clone, Debug)]
pub struct NetworkObjective {
    pub net: Sequential,
    pub input: Matrix,
    pub target: Vec<f64>,
    pub train: bool,
}

impl NetworkObjective {
    fn output(&self) -> Result<Matrix> {
        if self.train {
            Ok(self.net.forward_train(&self.input)?.0)
        } else {
            self.net.forward(&self.input)
        }
    }
}

impl Objective for NetworkObjective {
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.net.params_mut()
    }

    fn loss(&self) -> Result<f64> {
        let out = self.output()?;
        Ok(mse_loss(out.as_slice().expect("standard layout"), &self.target)?.0)
    }

    fn loss_and_grad(&self) -> Result<(f64, Gradients)> {
        let (out, tape) = self.net.forward_train(&self.input)?;
        let (loss, g) = mse_loss(out.as_slice().expect("standard layout"), &self.target)?;
        let g = Matrix::from_shape_vec(out.dim(), g).expect("shape preserved");
        let (_, grads) = self.net.backward(&tape, g)?;
        Ok((loss, grads))
    }
}
