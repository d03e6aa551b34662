use ndarray::{Array1, Array2};

use super::Matrix;
use crate::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch normalization over `channels` groups of `spatial` consecutive
/// features (`spatial = 1` for fully connected inputs).
///
/// Training normalizes with batch statistics; evaluation uses the running
/// estimates. Running variance tracks the unbiased batch variance.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub eps: f64,
    pub momentum: f64,
    pub spatial: usize,
}

pub(crate) struct BatchNormCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    var_unbiased: Vec<f64>,
}

impl BatchNormLayer {
    pub fn new(channels: usize, spatial: usize) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            spatial,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn features(&self) -> usize {
        self.channels() * self.spatial
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels()
    }

    fn check(&self, x: &Matrix) -> Result<()> {
        if x.ncols() != self.features() {
            return Err(Error::Shape(format!(
                "batch norm expects {} features, got {}",
                self.features(),
                x.ncols()
            )));
        }
        Ok(())
    }

    /// Evaluation-mode forward pass with running statistics.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.check(x)?;
        let mut out = x.clone();
        for c in 0..self.channels() {
            let scale = self.gamma[c] / (self.running_var[c] + self.eps).sqrt();
            let shift = self.beta[c] - self.running_mean[c] * scale;
            for mut row in out.rows_mut() {
                for v in row.iter_mut().skip(c * self.spatial).take(self.spatial) {
                    *v = *v * scale + shift;
                }
            }
        }
        Ok(out)
    }

    pub(crate) fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, BatchNormCache)> {
        self.check(x)?;
        let batch = x.nrows();
        if batch < 2 {
            return Err(Error::Shape(
                "batch norm in training mode needs a batch of at least 2".into(),
            ));
        }
        let s = self.spatial;
        let count = (batch * s) as f64;
        let channels = self.channels();
        let mut xhat = Array2::zeros(x.raw_dim());
        let mut out = Array2::zeros(x.raw_dim());
        let mut inv_std = Vec::with_capacity(channels);
        let mut means = Vec::with_capacity(channels);
        let mut vars = Vec::with_capacity(channels);
        for c in 0..channels {
            let range = c * s..(c + 1) * s;
            let mut sum = 0.0;
            for row in x.rows() {
                for f in range.clone() {
                    sum += row[f];
                }
            }
            let mean = sum / count;
            let mut sq = 0.0;
            for row in x.rows() {
                for f in range.clone() {
                    let d = row[f] - mean;
                    sq += d * d;
                }
            }
            let var = sq / count;
            let istd = 1.0 / (var + self.eps).sqrt();
            for b in 0..batch {
                for f in range.clone() {
                    let h = (x[[b, f]] - mean) * istd;
                    xhat[[b, f]] = h;
                    out[[b, f]] = self.gamma[c] * h + self.beta[c];
                }
            }
            inv_std.push(istd);
            means.push(mean);
            vars.push(sq / (count - 1.0));
        }
        Ok((
            out,
            BatchNormCache {
                xhat,
                inv_std,
                mean: means,
                var_unbiased: vars,
            },
        ))
    }

    pub(crate) fn update_running(&mut self, cache: &BatchNormCache) {
        let m = self.momentum;
        for c in 0..self.channels() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * cache.mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * cache.var_unbiased[c];
        }
    }

    pub(crate) fn set_running(&mut self, cache: &BatchNormCache) {
        self.running_mean.assign(&ndarray::ArrayView1::from(&cache.mean));
        self.running_var.assign(&ndarray::ArrayView1::from(&cache.var_unbiased));
    }

    /// Returns the input gradient and `[dγ, dβ]`.
    pub(crate) fn backward(&self, cache: &BatchNormCache, grad_out: &Matrix) -> (Matrix, [Vec<f64>; 2]) {
        let batch = grad_out.nrows();
        let s = self.spatial;
        let count = (batch * s) as f64;
        let mut grad_in = Array2::zeros(grad_out.raw_dim());
        let mut dgamma = vec![0.0; self.channels()];
        let mut dbeta = vec![0.0; self.channels()];
        for c in 0..self.channels() {
            let range = c * s..(c + 1) * s;
            let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
            for b in 0..batch {
                for f in range.clone() {
                    let dy = grad_out[[b, f]];
                    sum_dy += dy;
                    sum_dy_xhat += dy * cache.xhat[[b, f]];
                }
            }
            dgamma[c] = sum_dy_xhat;
            dbeta[c] = sum_dy;
            let k = self.gamma[c] * cache.inv_std[c] / count;
            for b in 0..batch {
                for f in range.clone() {
                    grad_in[[b, f]] = k
                        * (count * grad_out[[b, f]] - sum_dy - cache.xhat[[b, f]] * sum_dy_xhat);
                }
            }
        }
        (grad_in, [dgamma, dbeta])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn training_output_is_standardized() {
        let bn = BatchNormLayer::new(2, 3);
        let x = Array2::from_shape_fn((5, 6), |(b, f)| ((b * 7 + f * 3) as f64).sin() * 4.0 + f as f64);
        let (y, _) = bn.forward_cached(&x).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..5)
                .flat_map(|b| (c * 3..c * 3 + 3).map(move |f| (b, f)))
                .map(|(b, f)| y[[b, f]])
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-10);
            // eps shrinks the variance slightly below one.
            assert!((var - 1.0).abs() < 1e-3);
            assert!(var < 1.0);
        }
    }

    #[test]
    fn training_variance_matches_with_negligible_eps() {
        let mut bn = BatchNormLayer::new(1, 1);
        bn.eps = 1e-14;
        let x = Array2::from_shape_vec((4, 1), vec![1.0, 2.0, 4.0, 9.0]).unwrap();
        let (y, _) = bn.forward_cached(&x).unwrap();
        let var = y.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((var - 1.0).abs() < 1e-8);
    }

    #[test]
    fn eval_with_unit_stats_is_identity() {
        let bn = BatchNormLayer::new(2, 1);
        let x = Array2::from_shape_vec((1, 2), vec![0.3, -2.0]).unwrap();
        let y = bn.forward(&x).unwrap();
        for (a, b) in x.iter().zip(y.iter()) {
            assert!((a - b).abs() < 1e-5 * a.abs().max(1.0));
        }
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let bn = BatchNormLayer::new(1, 2);
        let x = Array2::from_elem((3, 2), 7.0);
        let (y, _) = bn.forward_cached(&x).unwrap();
        assert!(y.iter().all(|v| v.abs() < 1e-12 && v.is_finite()));
    }

    #[test]
    fn single_sample_batch_is_rejected_in_training() {
        let bn = BatchNormLayer::new(1, 4);
        assert!(bn.forward_cached(&Array2::zeros((1, 4))).is_err());
        assert!(bn.forward(&Array2::zeros((1, 4))).is_ok());
    }

    #[test]
    fn running_statistics_update() {
        let mut bn = BatchNormLayer::new(1, 1);
        let x = Array2::from_shape_vec((2, 1), vec![1.0, 3.0]).unwrap();
        let (_, cache) = bn.forward_cached(&x).unwrap();
        bn.update_running(&cache);
        assert!((bn.running_mean[0] - 0.2).abs() < 1e-15);
        assert!((bn.running_var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn eval_mode_is_batch_size_independent() {
        let mut bn = BatchNormLayer::new(2, 1);
        bn.running_mean[0] = 0.5;
        bn.running_var[1] = 3.0;
        bn.gamma[1] = 2.0;
        let x = Array2::from_shape_fn((4, 2), |(b, f)| (b + f) as f64 * 0.3);
        let all = bn.forward(&x).unwrap();
        for b in 0..4 {
            let one = bn.forward(&x.slice(ndarray::s![b..b + 1, ..]).to_owned()).unwrap();
            assert_eq!(one.row(0), all.row(b));
        }
    }
}
