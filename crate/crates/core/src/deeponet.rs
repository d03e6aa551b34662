//! Branch/trunk operator networks mapping pooled fields to high-resolution
//! values at arbitrary query coordinates.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::field::{Field, Grid};
use crate::nn::{
    mse_loss, Activation, AdamState, BatchNormLayer, Conv2DLayer, DenseLayer, Gradients, Init,
    Layer, Matrix, Objective, Sequential, Tape,
};
use crate::pool::{PoolMode, PooledSample, PoolingSpec};
use crate::seed;
use crate::spectral::Case;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"OSRM";
const VERSION: u8 = 1;

/// How branch inputs are scaled after subtracting the per-feature mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputScaling {
    /// Each feature by its own standard deviation.
    PerFeature,
    /// Every feature by the root-mean-square of the per-feature deviations.
    Global,
}

impl InputScaling {
    pub fn name(self) -> &'static str {
        match self {
            Self::PerFeature => "per_feature",
            Self::Global => "global",
        }
    }
}

impl std::fmt::Display for InputScaling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for InputScaling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_feature" => Ok(Self::PerFeature),
            "global" => Ok(Self::Global),
            _ => Err(Error::InvalidParameter(format!("unknown input scaling {s:?}"))),
        }
    }
}

/// Everything needed to rebuild a network's layer structure.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub case: Case,
    pub pooling: PoolingSpec,
    /// Pooled input resolution, x first.
    pub input_dims: Vec<usize>,
    /// Query-coordinate bounds per dimension, mapped onto `[-1, 1]`.
    pub domain: Vec<(f64, f64)>,
    /// Dense branch widths after the input (2D: after flattening); the last is `p`.
    pub branch_widths: Vec<usize>,
    /// Dense trunk widths after the coordinates; the last is `p`.
    pub trunk_widths: Vec<usize>,
    /// Hidden activation of the dense branch layers.
    pub branch_activation: Activation,
    pub trunk_activation: Activation,
    pub input_scaling: InputScaling,
    /// Batch-norm between the dense branch layers. Always on in 2D.
    pub branch_batchnorm: bool,
    /// 2D only: replicated channels, then the two convolution widths.
    pub conv_channels: [usize; 3],
    pub output_bias: bool,
}

impl Architecture {
    /// Default 1D network for pooled KdV-Burgers snapshots.
    pub fn kdvb(pooling: PoolingSpec, hr_grid: &Grid) -> Result<Self> {
        Self::defaults(Case::Kdvb, pooling, hr_grid)
    }

    /// Default 2D network for pooled Poisson solutions.
    pub fn poisson(pooling: PoolingSpec, hr_grid: &Grid) -> Result<Self> {
        Self::defaults(Case::Poisson, pooling, hr_grid)
    }

    pub fn defaults(case: Case, pooling: PoolingSpec, hr_grid: &Grid) -> Result<Self> {
        if hr_grid.ndim() != case.ndim() {
            return Err(Error::Shape(format!(
                "{case} needs a {}D grid, got {}D",
                case.ndim(),
                hr_grid.ndim()
            )));
        }
        let input_dims = pooling.pooled_dims(&hr_grid.dims())?;
        let branch_widths = match case {
            Case::Kdvb => vec![256, 256, 256, 128],
            Case::Poisson => vec![512, 256, 256, 128],
        };
        let arch = Self {
            case,
            pooling,
            input_dims,
            domain: hr_grid.bounds(),
            branch_widths,
            trunk_widths: vec![128; 4],
            branch_activation: Activation::Softplus,
            trunk_activation: Activation::Softplus,
            input_scaling: InputScaling::PerFeature,
            branch_batchnorm: case == Case::Poisson,
            conv_channels: [200, 100, 40],
            output_bias: true,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn ndim(&self) -> usize {
        self.case.ndim()
    }

    /// Interaction width shared by branch and trunk outputs.
    pub fn p(&self) -> usize {
        *self.branch_widths.last().unwrap_or(&0)
    }

    pub fn input_width(&self) -> usize {
        self.input_dims.iter().product()
    }

    /// Width entering the dense part of the branch.
    pub fn flatten_width(&self) -> usize {
        match self.case {
            Case::Kdvb => self.input_width(),
            Case::Poisson => {
                (self.input_dims[0] - 1) * (self.input_dims[1] - 1) * self.conv_channels[2]
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.input_dims.len() != self.ndim() || self.domain.len() != self.ndim() {
            return bad(format!(
                "{} expects {} input dimensions and domain axes",
                self.case,
                self.ndim()
            ));
        }
        if self.input_dims.contains(&0) {
            return bad("empty input".into());
        }
        if self.branch_widths.is_empty() || self.trunk_widths.is_empty() {
            return bad("branch and trunk need at least one layer".into());
        }
        if self.branch_widths.contains(&0) || self.trunk_widths.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        if self.branch_widths.last() != self.trunk_widths.last() {
            return bad(format!(
                "branch output width {} differs from trunk output width {}",
                self.p(),
                self.trunk_widths.last().unwrap_or(&0)
            ));
        }
        if self
            .domain
            .iter()
            .any(|&(lo, hi)| !(lo.is_finite() && hi.is_finite() && hi > lo))
        {
            return bad(format!("bad domain {:?}", self.domain));
        }
        if self.case == Case::Poisson {
            if self.input_dims.iter().any(|&d| d < 2) {
                return bad(format!(
                    "pooled input {}x{} is smaller than the 2x2 convolution",
                    self.input_dims[0], self.input_dims[1]
                ));
            }
            if self.conv_channels.contains(&0) {
                return bad("convolution channels must be positive".into());
            }
        }
        Ok(())
    }

    fn descriptor(&self) -> Vec<(&'static str, String)> {
        vec![
            ("case", self.case.to_string()),
            ("pool_mode", self.pooling.mode.to_string()),
            ("M", self.pooling.window.to_string()),
            ("input_dims", join(&self.input_dims)),
            (
                "domain",
                join(self.domain.iter().flat_map(|&(lo, hi)| [lo, hi])),
            ),
            ("branch_widths", join(&self.branch_widths)),
            ("trunk_widths", join(&self.trunk_widths)),
            ("p", self.p().to_string()),
            ("branch_activation", self.branch_activation.to_string()),
            ("trunk_activation", self.trunk_activation.to_string()),
            ("input_scaling", self.input_scaling.to_string()),
            ("branch_batchnorm", self.branch_batchnorm.to_string()),
            ("conv_channels", join(self.conv_channels)),
            ("output_bias", self.output_bias.to_string()),
        ]
    }

    fn from_descriptor(map: &BTreeMap<String, String>) -> Result<Self> {
        let domain: Vec<f64> = parse_list(field(map, "domain")?)?;
        if !domain.len().is_multiple_of(2) {
            return Err(Error::Format("domain needs lo,hi pairs".into()));
        }
        let conv: Vec<usize> = parse_list(field(map, "conv_channels")?)?;
        let conv_channels: [usize; 3] = conv
            .try_into()
            .map_err(|_| Error::Format("conv_channels needs three entries".into()))?;
        let arch = Self {
            case: parse(field(map, "case")?)?,
            pooling: PoolingSpec::new(
                parse::<PoolMode>(field(map, "pool_mode")?)?,
                parse(field(map, "M")?)?,
            )?,
            input_dims: parse_list(field(map, "input_dims")?)?,
            domain: domain.chunks(2).map(|c| (c[0], c[1])).collect(),
            branch_widths: parse_list(field(map, "branch_widths")?)?,
            trunk_widths: parse_list(field(map, "trunk_widths")?)?,
            branch_activation: parse(field(map, "branch_activation")?)?,
            trunk_activation: parse(field(map, "trunk_activation")?)?,
            input_scaling: parse(field(map, "input_scaling")?)?,
            branch_batchnorm: parse(field(map, "branch_batchnorm")?)?,
            conv_channels,
            output_bias: parse(field(map, "output_bias")?)?,
        };
        let p: usize = parse(field(map, "p")?)?;
        if p != arch.p() {
            return Err(Error::Format(format!(
                "descriptor p={p} disagrees with branch widths {:?}",
                arch.branch_widths
            )));
        }
        arch.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(arch)
    }
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items
        .into_iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn field<'a>(map: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    map.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Format(format!("checkpoint descriptor lacks {key}")))
}

fn parse<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Format(format!("cannot parse {s:?} in checkpoint descriptor")))
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(parse).collect()
}

fn init_for(activation: Activation) -> Init {
    match activation {
        Activation::Relu => Init::HeUniform,
        _ => Init::GlorotUniform,
    }
}

/// Dense stack `in → widths…` with hidden activation and identity output.
fn mlp<R: Rng>(
    input: usize,
    widths: &[usize],
    activation: Activation,
    batchnorm: bool,
    rng: &mut R,
) -> Vec<Layer> {
    let mut layers = Vec::new();
    let mut width = input;
    for (i, &out) in widths.iter().enumerate() {
        let last = i + 1 == widths.len();
        if last {
            layers.push(Layer::Dense(DenseLayer::new(
                width,
                out,
                Activation::Identity,
                Init::GlorotUniform,
                rng,
            )));
        } else if batchnorm {
            layers.push(Layer::Dense(DenseLayer::new(
                width,
                out,
                Activation::Identity,
                init_for(activation),
                rng,
            )));
            layers.push(Layer::BatchNorm(BatchNormLayer::new(out, 1)));
            layers.push(Layer::Activation(activation));
        } else {
            layers.push(Layer::Dense(DenseLayer::new(
                width,
                out,
                activation,
                init_for(activation),
                rng,
            )));
        }
        width = out;
    }
    layers
}

fn build_branch(arch: &Architecture, seed: u64) -> Result<Sequential> {
    let mut rng = seed::rng_for(seed, &[1]);
    let mut layers = Vec::new();
    if arch.case == Case::Poisson {
        let (w, h) = (arch.input_dims[0], arch.input_dims[1]);
        let [c0, c1, c2] = arch.conv_channels;
        layers.push(Layer::Replicate { channels: c0 });
        layers.push(Layer::Conv2d(Conv2DLayer::new(
            c0,
            c1,
            1,
            (h, w),
            Init::HeUniform,
            &mut rng,
        )?));
        layers.push(Layer::BatchNorm(BatchNormLayer::new(c1, h * w)));
        layers.push(Layer::Activation(Activation::Relu));
        layers.push(Layer::Conv2d(Conv2DLayer::new(
            c1,
            c2,
            2,
            (h, w),
            Init::HeUniform,
            &mut rng,
        )?));
        layers.push(Layer::BatchNorm(BatchNormLayer::new(c2, (h - 1) * (w - 1))));
        layers.push(Layer::Activation(Activation::Relu));
    }
    layers.extend(mlp(
        arch.flatten_width(),
        &arch.branch_widths,
        arch.branch_activation,
        arch.branch_batchnorm,
        &mut rng,
    ));
    Ok(Sequential::new(layers))
}

fn build_trunk(arch: &Architecture, seed: u64) -> Sequential {
    let mut rng = seed::rng_for(seed, &[2]);
    Sequential::new(mlp(
        arch.ndim(),
        &arch.trunk_widths,
        arch.trunk_activation,
        false,
        &mut rng,
    ))
}

/// A training batch: `S` snapshots with `Q` query points each.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Raw pooled inputs, `[S, input_width]`.
    pub inputs: Matrix,
    /// Raw query coordinates: `[S·Q, ndim]` grouped by snapshot, or `[Q, ndim]`
    /// used by every snapshot when `shared_coords` is set.
    pub coords: Matrix,
    /// High-resolution values, `S·Q` entries grouped by snapshot.
    pub targets: Vec<f64>,
    pub shared_coords: bool,
}

impl Batch {
    pub fn snapshots(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn points_per_snapshot(&self) -> usize {
        if self.shared_coords {
            self.coords.nrows()
        } else {
            self.coords.nrows() / self.inputs.nrows().max(1)
        }
    }

    /// Row of the trunk output used by prediction `i`.
    fn trunk_row(&self, i: usize) -> usize {
        if self.shared_coords {
            i % self.coords.nrows()
        } else {
            i
        }
    }
}

/// Loss, gradients and the forward records needed to update batch-norm statistics.
pub struct StepOutput {
    pub loss: f64,
    pub grads: Gradients,
    branch_tape: Tape,
    trunk_tape: Tape,
}

/// A DeepONet: `out(u, y) = s · branch(u) · trunk(y) + b₀`.
///
/// `s` is a frozen output scale (1 unless set from training targets).
#[derive(Clone, Debug, PartialEq)]
pub struct DeepOnet {
    arch: Architecture,
    pub branch: Sequential,
    pub trunk: Sequential,
    pub bias: f64,
    pub output_scale: f64,
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
}

pub fn build_deeponet_1d(arch: Architecture, seed: u64) -> Result<DeepOnet> {
    if arch.case != Case::Kdvb {
        return Err(Error::InvalidParameter("not a 1D architecture".into()));
    }
    DeepOnet::new(arch, seed)
}

pub fn build_deeponet_2d(arch: Architecture, seed: u64) -> Result<DeepOnet> {
    if arch.case != Case::Poisson {
        return Err(Error::InvalidParameter("not a 2D architecture".into()));
    }
    DeepOnet::new(arch, seed)
}

impl DeepOnet {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let n = arch.input_width();
        Ok(Self {
            branch: build_branch(&arch, seed)?,
            trunk: build_trunk(&arch, seed),
            bias: 0.0,
            output_scale: 1.0,
            input_mean: vec![0.0; n],
            input_std: vec![1.0; n],
            arch,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn param_count(&self) -> usize {
        self.branch.param_count() + self.trunk.param_count() + usize::from(self.arch.output_bias)
    }

    /// Trainable tensors: branch, trunk, then `b₀` when enabled.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = self.branch.params();
        out.extend(self.trunk.params());
        if self.arch.output_bias {
            out.push(std::slice::from_ref(&self.bias));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.branch.params_mut();
        out.extend(self.trunk.params_mut());
        if self.arch.output_bias {
            out.push(std::slice::from_mut(&mut self.bias));
        }
        out
    }

    /// Freeze input statistics and the output offset/scale from training data.
    pub fn fit_normalization(&mut self, inputs: &[&[f64]], targets: &[f64]) -> Result<()> {
        let n = self.arch.input_width();
        if inputs.is_empty() || targets.is_empty() {
            return Err(Error::Empty("normalization data"));
        }
        if let Some(bad) = inputs.iter().find(|r| r.len() != n) {
            return Err(Error::Shape(format!(
                "input width {} != expected {n}",
                bad.len()
            )));
        }
        let count = inputs.len() as f64;
        for k in 0..n {
            let mean = inputs.iter().map(|r| r[k]).sum::<f64>() / count;
            let var = inputs.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / count;
            self.input_mean[k] = mean;
            self.input_std[k] = std_or_one(var, mean);
        }
        if self.arch.input_scaling == InputScaling::Global {
            let g = (self.input_std.iter().map(|s| s * s).sum::<f64>() / n as f64).sqrt();
            self.input_std.iter_mut().for_each(|s| *s = g);
        }
        let tm = targets.iter().sum::<f64>() / targets.len() as f64;
        let tv = targets.iter().map(|t| (t - tm).powi(2)).sum::<f64>() / targets.len() as f64;
        self.output_scale = std_or_one(tv, tm);
        if self.arch.output_bias {
            self.bias = tm;
        }
        Ok(())
    }

    fn check_compatible(&self, sample: &PooledSample) -> Result<()> {
        if sample.dims != self.arch.input_dims {
            return Err(Error::Shape(format!(
                "pooled input {:?} does not match model input {:?}",
                sample.dims, self.arch.input_dims
            )));
        }
        Ok(())
    }

    /// Standardized branch inputs, one row per sample.
    pub fn normalize_inputs(&self, rows: &[&[f64]]) -> Result<Matrix> {
        let n = self.arch.input_width();
        let mut out = Matrix::zeros((rows.len(), n));
        for (r, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Shape(format!(
                    "input width {} != expected {n}",
                    row.len()
                )));
            }
            crate::field::check_finite(row)?;
            for k in 0..n {
                out[[r, k]] = (row[k] - self.input_mean[k]) / self.input_std[k];
            }
        }
        Ok(out)
    }

    fn normalize_matrix(&self, raw: &Matrix) -> Result<Matrix> {
        let rows: Vec<&[f64]> = raw
            .rows()
            .into_iter()
            .map(|r| r.to_slice().expect("standard layout"))
            .collect();
        self.normalize_inputs(&rows)
    }

    /// Query coordinates mapped affinely onto `[-1, 1]`.
    pub fn scale_coords(&self, coords: &Matrix) -> Result<Matrix> {
        if coords.ncols() != self.arch.ndim() {
            return Err(Error::Shape(format!(
                "{} coordinates per point, expected {}",
                coords.ncols(),
                self.arch.ndim()
            )));
        }
        crate::field::check_finite(coords.as_slice().expect("standard layout"))?;
        let mut out = coords.clone();
        for (d, &(lo, hi)) in self.arch.domain.iter().enumerate() {
            out.column_mut(d)
                .mapv_inplace(|v| 2.0 * (v - lo) / (hi - lo) - 1.0);
        }
        Ok(out)
    }

    fn combine(&self, branch: &Matrix, trunk: &Matrix) -> Vec<f64> {
        let q = trunk.nrows() / branch.nrows().max(1);
        trunk
            .rows()
            .into_iter()
            .enumerate()
            .map(|(i, t)| self.output_scale * dot(branch.row(i / q), t) + self.bias)
            .collect()
    }

    fn combine_batch(&self, batch: &Batch, branch: &Matrix, trunk: &Matrix) -> Vec<f64> {
        let q = batch.points_per_snapshot();
        (0..batch.snapshots() * q)
            .map(|i| {
                let t = trunk.row(batch.trunk_row(i));
                self.output_scale * dot(branch.row(i / q), t) + self.bias
            })
            .collect()
    }

    /// Evaluation-mode prediction at a single query coordinate.
    pub fn forward(&self, sample: &PooledSample, y: &[f64]) -> Result<f64> {
        self.check_compatible(sample)?;
        let b = self.branch.forward(&self.normalize_inputs(&[&sample.values])?)?;
        let coords = Matrix::from_shape_vec((1, y.len()), y.to_vec())
            .map_err(|e| Error::Shape(e.to_string()))?;
        let t = self.trunk.forward(&self.scale_coords(&coords)?)?;
        Ok(self.combine(&b, &t)[0])
    }

    /// Trunk features at every point of `grid`, in storage order.
    pub fn trunk_features(&self, grid: &Grid) -> Result<Matrix> {
        self.check_grid(grid)?;
        let coords = grid_coords(grid);
        self.trunk.forward(&self.scale_coords(&coords)?)
    }

    fn check_grid(&self, grid: &Grid) -> Result<()> {
        let pooled = self.arch.pooling.pooled_dims(&grid.dims())?;
        if grid.ndim() != self.arch.ndim() || pooled != self.arch.input_dims {
            return Err(Error::Shape(format!(
                "grid {:?} does not pool to model input {:?}",
                grid.dims(),
                self.arch.input_dims
            )));
        }
        Ok(())
    }

    /// Predict full fields on `grid` for several samples, sharing the trunk pass.
    pub fn predict_fields(&self, samples: &[&PooledSample], grid: &Grid) -> Result<Vec<Field>> {
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        let trunk = self.trunk_features(grid)?;
        samples
            .iter()
            .map(|s| self.predict_with_trunk(s, &trunk, grid))
            .collect()
    }

    /// Predict on `grid` given its precomputed [`DeepOnet::trunk_features`].
    pub fn predict_with_trunk(
        &self,
        sample: &PooledSample,
        trunk: &Matrix,
        grid: &Grid,
    ) -> Result<Field> {
        self.check_compatible(sample)?;
        if trunk.nrows() != grid.len() || trunk.ncols() != self.arch.p() {
            return Err(Error::Shape(format!(
                "trunk features {:?} do not cover a grid of {} points",
                trunk.dim(),
                grid.len()
            )));
        }
        let branch = self.branch.forward(&self.normalize_inputs(&[&sample.values])?)?;
        let b = branch.row(0);
        let values = trunk
            .rows()
            .into_iter()
            .map(|t| self.output_scale * dot(b, t) + self.bias)
            .collect();
        grid.field(values)
    }

    pub fn predict_field(&self, sample: &PooledSample, grid: &Grid) -> Result<Field> {
        Ok(self
            .predict_fields(&[sample], grid)?
            .pop()
            .expect("one sample in, one field out"))
    }

    fn outputs(&self, batch: &Batch, train: bool) -> Result<Vec<f64>> {
        check_batch(batch)?;
        let x = self.normalize_matrix(&batch.inputs)?;
        let y = self.scale_coords(&batch.coords)?;
        let (b, t) = if train {
            (self.branch.forward_train(&x)?.0, self.trunk.forward_train(&y)?.0)
        } else {
            (self.branch.forward(&x)?, self.trunk.forward(&y)?)
        };
        Ok(self.combine_batch(batch, &b, &t))
    }

    /// Batch MSE; `train` selects batch statistics in batch-norm layers.
    pub fn loss(&self, batch: &Batch, train: bool) -> Result<f64> {
        Ok(mse_loss(&self.outputs(batch, train)?, &batch.targets)?.0)
    }

    /// Training-mode loss and its gradient with respect to [`DeepOnet::params`].
    pub fn loss_and_grad(&self, batch: &Batch) -> Result<StepOutput> {
        check_batch(batch)?;
        let x = self.normalize_matrix(&batch.inputs)?;
        let y = self.scale_coords(&batch.coords)?;
        let (b, branch_tape) = self.branch.forward_train(&x)?;
        let (t, trunk_tape) = self.trunk.forward_train(&y)?;
        let pred = self.combine_batch(batch, &b, &t);
        let (loss, g) = mse_loss(&pred, &batch.targets)?;
        let q = batch.points_per_snapshot();
        let s = self.output_scale;
        let mut gb = Matrix::zeros(b.dim());
        let mut gt = Matrix::zeros(t.dim());
        for (i, &gi) in g.iter().enumerate() {
            let k = i / q;
            let r = batch.trunk_row(i);
            let w = s * gi;
            for j in 0..b.ncols() {
                gb[[k, j]] += w * t[[r, j]];
                gt[[r, j]] += w * b[[k, j]];
            }
        }
        let (_, mut grads) = self.branch.backward(&branch_tape, gb)?;
        let (_, trunk_grads) = self.trunk.backward(&trunk_tape, gt)?;
        grads.extend(trunk_grads);
        if self.arch.output_bias {
            grads.push(vec![g.iter().sum()]);
        }
        Ok(StepOutput {
            loss,
            grads,
            branch_tape,
            trunk_tape,
        })
    }

    pub fn update_running_stats(&mut self, step: &StepOutput) {
        self.branch.update_running_stats(&step.branch_tape);
        self.trunk.update_running_stats(&step.trunk_tape);
    }

    /// Replace batch-norm running statistics with full-population statistics of `inputs`.
    pub fn recalibrate_batchnorm(&mut self, inputs: &[&[f64]]) -> Result<()> {
        if inputs.len() < 2 {
            return Ok(());
        }
        let x = self.normalize_inputs(inputs)?;
        let (_, tape) = self.branch.forward_train(&x)?;
        self.branch.set_running_stats(&tape);
        Ok(())
    }

    pub fn to_bytes(&self, adam: Option<&AdamState>) -> Vec<u8> {
        let mut desc = String::new();
        for (k, v) in self.arch.descriptor() {
            desc.push_str(&format!("{k}={v}\n"));
        }
        desc.push_str(&format!("output_scale={}\n", self.output_scale));
        desc.push_str(&format!("input_mean={}\n", join(&self.input_mean)));
        desc.push_str(&format!("input_std={}\n", join(&self.input_std)));

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
        out.extend_from_slice(desc.as_bytes());
        let params = self.flat_params();
        write_floats(&mut out, &params);
        let buffers: Vec<f64> = self.buffers().into_iter().flatten().copied().collect();
        write_floats(&mut out, &buffers);
        match adam {
            None => out.push(0),
            Some(a) => {
                out.push(1);
                out.extend_from_slice(&a.step.to_le_bytes());
                write_floats(&mut out, &a.m.concat());
                write_floats(&mut out, &a.v.concat());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, Option<AdamState>)> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a model checkpoint (bad magic)".into()));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let len = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as usize;
        let desc = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("descriptor is not UTF-8".into()))?;
        let mut map = BTreeMap::new();
        for line in desc.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad descriptor line {line:?}")))?;
            map.insert(k.to_string(), v.to_string());
        }
        let arch = Architecture::from_descriptor(&map)?;
        let mut model = DeepOnet::new(arch, 0).map_err(|e| Error::Format(e.to_string()))?;
        model.output_scale = parse(field(&map, "output_scale")?)?;
        model.input_mean = parse_list(field(&map, "input_mean")?)?;
        model.input_std = parse_list(field(&map, "input_std")?)?;
        let n = model.arch.input_width();
        if model.input_mean.len() != n || model.input_std.len() != n {
            return Err(Error::Format(format!(
                "normalization statistics do not have {n} entries"
            )));
        }

        let expected = model.param_count();
        let params = r.floats("parameter", expected)?;
        let mut offset = 0;
        for t in model.params_mut() {
            t.copy_from_slice(&params[offset..offset + t.len()]);
            offset += t.len();
        }
        let expected = model.buffers().iter().map(|b| b.len()).sum();
        let buffers = r.floats("buffer", expected)?;
        let mut offset = 0;
        for b in model.branch.buffers_mut() {
            b.copy_from_slice(&buffers[offset..offset + b.len()]);
            offset += b.len();
        }
        let adam = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
                let m = split(r.floats("optimizer", model.param_count())?, &sizes);
                let v = split(r.floats("optimizer", model.param_count())?, &sizes);
                Some(AdamState { step, m, v })
            }
            other => return Err(Error::Format(format!("bad optimizer flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok((model, adam))
    }

    pub fn save(&self, path: &Path, adam: Option<&AdamState>) -> Result<()> {
        fs::write(path, self.to_bytes(adam)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, Option<AdamState>)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn flat_params(&self) -> Vec<f64> {
        self.params().concat()
    }

    fn buffers(&self) -> Vec<&[f64]> {
        let mut out = self.branch.buffers();
        out.extend(self.trunk.buffers());
        out
    }
}

fn std_or_one(var: f64, mean: f64) -> f64 {
    let sd = var.sqrt();
    if sd > 1e-12 * mean.abs().max(1.0) {
        sd
    } else {
        1.0
    }
}

fn dot(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn check_batch(batch: &Batch) -> Result<()> {
    let s = batch.inputs.nrows();
    if s == 0 || batch.coords.nrows() == 0 {
        return Err(Error::Empty("batch"));
    }
    let expected = if batch.shared_coords {
        s * batch.coords.nrows()
    } else {
        batch.coords.nrows()
    };
    if !batch.coords.nrows().is_multiple_of(s) && !batch.shared_coords || batch.targets.len() != expected {
        return Err(Error::Shape(format!(
            "{s} snapshots, {} coordinates and {} targets do not form a batch",
            batch.coords.nrows(),
            batch.targets.len()
        )));
    }
    Ok(())
}

/// All grid points as a `[len, ndim]` matrix in storage order.
pub fn grid_coords(grid: &Grid) -> Matrix {
    let d = grid.ndim();
    let mut m = Matrix::zeros((grid.len(), d));
    for k in 0..grid.len() {
        for (j, v) in grid.point(k).into_iter().enumerate() {
            m[[k, j]] = v;
        }
    }
    m
}

fn split(flat: Vec<f64>, sizes: &[usize]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(sizes.len());
    let mut rest = flat.as_slice();
    for &n in sizes {
        let (head, tail) = rest.split_at(n);
        out.push(head.to_vec());
        rest = tail;
    }
    out
}

fn write_floats(out: &mut Vec<u8>, values: &[f64]) {
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn floats(&mut self, what: &str, expected: usize) -> Result<Vec<f64>> {
        let n = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize;
        if n != expected {
            return Err(Error::Format(format!(
                "descriptor implies {expected} {what} values but the blob holds {n}"
            )));
        }
        let raw = self.take(n.checked_mul(8).ok_or_else(|| {
            Error::Format(format!("absurd {what} count {n}"))
        })?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Training-mode batch loss of a model, for gradient checking.
#[derive(Clone, Debug)]
pub struct DeepOnetObjective {
    pub model: DeepOnet,
    pub batch: Batch,
}

impl Objective for DeepOnetObjective {
    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.model.params_mut()
    }

    fn loss(&self) -> Result<f64> {
        self.model.loss(&self.batch, true)
    }

    fn loss_and_grad(&self) -> Result<(f64, Gradients)> {
        let out = self.model.loss_and_grad(&self.batch)?;
        Ok((out.loss, out.grads))
    }
}
