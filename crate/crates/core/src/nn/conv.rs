use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use super::{into_flat, Init, Matrix};
use crate::{Error, Result};

/// Valid (unpadded), stride-1 2D cross-correlation.
///
/// Kernels are stored `[out][in·k·k]`, i.e. the row-major flattening of an
/// `[out][in][k][k]` tensor. Input rows are `[in][h][w]` blocks, output rows
/// `[out][h−k+1][w−k+1]` blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2DLayer {
    pub kernels: Array2<f64>,
    pub biases: Array1<f64>,
    pub in_channels: usize,
    pub kernel: usize,
    pub in_h: usize,
    pub in_w: usize,
}

pub(crate) struct ConvCache {
    col: Matrix,
    batch: usize,
}

impl Conv2DLayer {
    pub fn zeros(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        in_h: usize,
        in_w: usize,
    ) -> Result<Self> {
        if kernel == 0 || in_h < kernel || in_w < kernel {
            return Err(Error::Shape(format!(
                "{in_h}x{in_w} input is smaller than a {kernel}x{kernel} kernel"
            )));
        }
        Ok(Self {
            kernels: Array2::zeros((out_channels, in_channels * kernel * kernel)),
            biases: Array1::zeros(out_channels),
            in_channels,
            kernel,
            in_h,
            in_w,
        })
    }

    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        (in_h, in_w): (usize, usize),
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layer = Self::zeros(in_channels, out_channels, kernel, in_h, in_w)?;
        let k2 = kernel * kernel;
        let bound = init.bound(in_channels * k2, out_channels * k2);
        layer.kernels.mapv_inplace(|_| rng.gen_range(-bound..=bound));
        Ok(layer)
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.nrows()
    }

    pub fn out_h(&self) -> usize {
        self.in_h - self.kernel + 1
    }

    pub fn out_w(&self) -> usize {
        self.in_w - self.kernel + 1
    }

    pub fn in_features(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    pub fn out_features(&self) -> usize {
        self.out_channels() * self.out_h() * self.out_w()
    }

    pub fn param_count(&self) -> usize {
        self.kernels.len() + self.biases.len()
    }

    pub fn kernel_at(&self, o: usize, c: usize, di: usize, dj: usize) -> f64 {
        let k = self.kernel;
        self.kernels[[o, (c * k + di) * k + dj]]
    }

    /// Unfold the batch into `[in·k·k, batch·oh·ow]` patches.
    fn im2col(&self, x: &Matrix) -> Result<Matrix> {
        if x.ncols() != self.in_features() {
            return Err(Error::Shape(format!(
                "conv layer expects {} features ({}x{}x{}), got {}",
                self.in_features(),
                self.in_channels,
                self.in_h,
                self.in_w,
                x.ncols()
            )));
        }
        let (k, oh, ow) = (self.kernel, self.out_h(), self.out_w());
        let ohw = oh * ow;
        let batch = x.nrows();
        let mut col = Array2::zeros((self.in_channels * k * k, batch * ohw));
        let hw = self.in_h * self.in_w;
        for (b, row) in x.axis_iter(Axis(0)).enumerate() {
            for c in 0..self.in_channels {
                for di in 0..k {
                    for dj in 0..k {
                        let r = (c * k + di) * k + dj;
                        let mut dst = col.row_mut(r);
                        for i in 0..oh {
                            let src = c * hw + (i + di) * self.in_w + dj;
                            for j in 0..ow {
                                dst[b * ohw + i * ow + j] = row[src + j];
                            }
                        }
                    }
                }
            }
        }
        Ok(col)
    }

    fn apply(&self, col: &Matrix, batch: usize) -> Matrix {
        let ohw = self.out_h() * self.out_w();
        let mut prod = self.kernels.dot(col);
        prod += &self.biases.view().insert_axis(Axis(1));
        let mut out = Array2::zeros((batch, self.out_features()));
        for o in 0..self.out_channels() {
            let src = prod.row(o);
            for b in 0..batch {
                let mut dst = out.row_mut(b);
                for p in 0..ohw {
                    dst[o * ohw + p] = src[b * ohw + p];
                }
            }
        }
        out
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let col = self.im2col(x)?;
        Ok(self.apply(&col, x.nrows()))
    }

    pub(crate) fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, ConvCache)> {
        let col = self.im2col(x)?;
        let out = self.apply(&col, x.nrows());
        Ok((
            out,
            ConvCache {
                col,
                batch: x.nrows(),
            },
        ))
    }

    /// Returns the input gradient and `[dK, db]`.
    pub(crate) fn backward(&self, cache: &ConvCache, grad_out: &Matrix) -> (Matrix, [Vec<f64>; 2]) {
        let (k, oh, ow) = (self.kernel, self.out_h(), self.out_w());
        let ohw = oh * ow;
        let batch = cache.batch;
        let mut dy = Array2::zeros((self.out_channels(), batch * ohw));
        for b in 0..batch {
            let src = grad_out.row(b);
            for o in 0..self.out_channels() {
                let mut dst = dy.row_mut(o);
                for p in 0..ohw {
                    dst[b * ohw + p] = src[o * ohw + p];
                }
            }
        }
        let grad_k = dy.dot(&cache.col.t());
        let grad_b = dy.sum_axis(Axis(1));
        let dcol = self.kernels.t().dot(&dy);

        let hw = self.in_h * self.in_w;
        let mut grad_in = Array2::zeros((batch, self.in_features()));
        for c in 0..self.in_channels {
            for di in 0..k {
                for dj in 0..k {
                    let src = dcol.row((c * k + di) * k + dj);
                    for b in 0..batch {
                        let mut dst = grad_in.row_mut(b);
                        for i in 0..oh {
                            let base = c * hw + (i + di) * self.in_w + dj;
                            for j in 0..ow {
                                dst[base + j] += src[b * ohw + i * ow + j];
                            }
                        }
                    }
                }
            }
        }
        (grad_in, [into_flat(grad_k), grad_b.to_vec()])
    }
}
