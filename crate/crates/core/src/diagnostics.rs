//! Finite-difference gradient checks over every layer kind and both
//! DeepONet assemblies.

use rand::Rng;

use crate::deeponet::{grid_coords, Architecture, Batch, DeepOnet, DeepOnetObjective};
use crate::field::{Grid, Grid1D, Grid2D};
use crate::nn::{
    grad_check, Activation, BatchNormLayer, Conv2DLayer, DenseLayer, GradCheckConfig, Init, Layer,
    Matrix, NetworkObjective, Sequential,
};
use crate::pool::{PoolMode, PoolingSpec};
use crate::seed;
use crate::Result;

/// Tolerance for stacks without batch normalization.
pub const LAYER_TOLERANCE: f64 = 1e-6;
/// Tolerance for composites whose gradient passes through batch normalization.
pub const BATCHNORM_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckRow {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
}

impl GradCheckRow {
    pub fn passes(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

fn random_matrix(rows: usize, cols: usize, seed_: u64) -> Matrix {
    let mut rng = seed::rng(seed_);
    Matrix::from_shape_fn((rows, cols), |_| rng.gen_range(-1.5..1.5))
}

fn network_row(
    name: &'static str,
    net: Sequential,
    input: Matrix,
    tolerance: f64,
    seed_: u64,
) -> Result<GradCheckRow> {
    let out = net.forward_train(&input)?.0;
    let mut rng = seed::rng(seed_);
    let target = (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut obj = NetworkObjective {
        net,
        input,
        target,
        train: true,
    };
    let report = grad_check(&mut obj, &GradCheckConfig::default())?;
    Ok(GradCheckRow {
        name,
        max_rel_error: report.max_rel_error,
        tolerance,
        checked: report.checked,
    })
}

fn random_batchnorm<R: Rng>(channels: usize, spatial: usize, rng: &mut R) -> BatchNormLayer {
    let mut bn = BatchNormLayer::new(channels, spatial);
    bn.gamma.iter_mut().for_each(|g| *g = rng.gen_range(0.5..1.5));
    bn.beta.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
    bn
}

fn deeponet_row(
    name: &'static str,
    arch: Architecture,
    grid: &Grid,
    snapshots: usize,
    points: usize,
    tolerance: f64,
    seed_: u64,
) -> Result<GradCheckRow> {
    let model = DeepOnet::new(arch, seed_)?;
    let mut rng = seed::rng(seed_ + 1);
    let arch = model.architecture();
    let inputs = Matrix::from_shape_fn((snapshots, arch.input_width()), |_| {
        rng.gen_range(-2.0..2.0)
    });
    let all = grid_coords(grid);
    let coords = Matrix::from_shape_fn((snapshots * points, arch.ndim()), |(i, d)| {
        all[[(i * 7 + 3) % all.nrows(), d]]
    });
    let targets = (0..snapshots * points)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let batch = Batch {
        inputs,
        coords,
        targets,
        shared_coords: false,
    };
    let mut obj = DeepOnetObjective { model, batch };
    let report = grad_check(&mut obj, &GradCheckConfig::default())?;
    Ok(GradCheckRow {
        name,
        max_rel_error: report.max_rel_error,
        tolerance,
        checked: report.checked,
    })
}

/// Run every check; small networks keep the full suite to a few seconds.
pub fn gradient_suite(seed_: u64) -> Result<Vec<GradCheckRow>> {
    let mut rng = seed::rng_for(seed_, &[0]);
    let mut rows = Vec::new();
    for (name, act) in [
        ("dense identity", Activation::Identity),
        ("dense relu", Activation::Relu),
        ("dense softplus", Activation::Softplus),
    ] {
        let net = Sequential::new(vec![Layer::Dense(DenseLayer::new(
            6,
            5,
            act,
            Init::GlorotUniform,
            &mut rng,
        ))]);
        rows.push(network_row(name, net, random_matrix(4, 6, seed_ + 1), LAYER_TOLERANCE, seed_ + 2)?);
    }
    for (name, k) in [("conv k=1", 1), ("conv k=2", 2)] {
        let conv = Conv2DLayer::new(3, 4, k, (4, 5), Init::GlorotUniform, &mut rng)?;
        let net = Sequential::new(vec![Layer::Conv2d(conv)]);
        rows.push(network_row(name, net, random_matrix(3, 60, seed_ + 3), LAYER_TOLERANCE, seed_ + 4)?);
    }
    let net = Sequential::new(vec![Layer::BatchNorm(random_batchnorm(3, 4, &mut rng))]);
    rows.push(network_row("batchnorm", net, random_matrix(5, 12, seed_ + 5), LAYER_TOLERANCE, seed_ + 6)?);
    let net = Sequential::new(vec![
        Layer::Replicate { channels: 3 },
        Layer::Conv2d(Conv2DLayer::new(3, 2, 1, (3, 3), Init::HeUniform, &mut rng)?),
    ]);
    rows.push(network_row("replicate + conv", net, random_matrix(4, 9, seed_ + 7), LAYER_TOLERANCE, seed_ + 8)?);
    let net = Sequential::new(vec![
        Layer::Conv2d(Conv2DLayer::new(2, 3, 2, (4, 5), Init::GlorotUniform, &mut rng)?),
        Layer::BatchNorm(random_batchnorm(3, 12, &mut rng)),
        Layer::Activation(Activation::Softplus),
    ]);
    rows.push(network_row(
        "conv k=2 + batchnorm + softplus",
        net,
        random_matrix(6, 40, seed_ + 9),
        LAYER_TOLERANCE,
        seed_ + 10,
    )?);

    let grid1 = Grid::OneD(Grid1D::new(64, 0.0, 10.0, true)?);
    let mut arch1 = Architecture::kdvb(PoolingSpec::new(PoolMode::Average, 8)?, &grid1)?;
    arch1.branch_widths = vec![10, 9, 5];
    arch1.trunk_widths = vec![7, 6, 5];
    rows.push(deeponet_row("deeponet 1d", arch1, &grid1, 3, 5, LAYER_TOLERANCE, seed_ + 11)?);

    let grid2 = Grid::TwoD(Grid2D::new(16, 16)?);
    let mut arch2 = Architecture::poisson(PoolingSpec::new(PoolMode::Max, 4)?, &grid2)?;
    arch2.conv_channels = [5, 4, 3];
    arch2.branch_widths = vec![8, 7, 6, 4];
    arch2.trunk_widths = vec![6, 5, 4];
    rows.push(deeponet_row("deeponet 2d", arch2, &grid2, 4, 3, BATCHNORM_TOLERANCE, seed_ + 12)?);
    Ok(rows)
}
