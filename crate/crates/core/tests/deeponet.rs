use ndarray::Array1;
use opsr_core::deeponet::{
    build_deeponet_1d, build_deeponet_2d, grid_coords, Architecture, Batch, DeepOnet,
    DeepOnetObjective,
};
use opsr_core::field::{Field, Field1D, Field2D, Grid, Grid1D, Grid2D};
use opsr_core::nn::{grad_check, AdamState, GradCheckConfig, Layer, Matrix};
use opsr_core::pool::{pool, PoolMode, PooledSample, PoolingSpec};
use opsr_core::seed;
use opsr_core::Error;
use rand::Rng;

fn grid_1d(n: usize) -> Grid {
    Grid::OneD(Grid1D::new(n, 0.0, 10.0, true).unwrap())
}

fn grid_2d(n: usize) -> Grid {
    Grid::TwoD(Grid2D::new(n, n).unwrap())
}

fn spec(mode: PoolMode, m: usize) -> PoolingSpec {
    PoolingSpec::new(mode, m).unwrap()
}

fn small_1d(m: usize) -> Architecture {
    let mut a = Architecture::kdvb(spec(PoolMode::Average, m), &grid_1d(64)).unwrap();
    a.branch_widths = vec![10, 9, 5];
    a.trunk_widths = vec![7, 6, 5];
    a
}

fn small_2d() -> Architecture {
    let mut a = Architecture::poisson(spec(PoolMode::Max, 4), &grid_2d(16)).unwrap();
    a.conv_channels = [5, 4, 3];
    a.branch_widths = vec![8, 7, 6, 4];
    a.trunk_widths = vec![6, 5, 4];
    a
}

fn random_sample(dims: &[usize], mode: PoolMode, m: usize, seed_: u64) -> PooledSample {
    let mut rng = seed::rng(seed_);
    let field: Field = if dims.len() == 1 {
        let g = Grid1D::new(dims[0], 0.0, 10.0, true).unwrap();
        Field1D::new(g, (0..dims[0]).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
            .into()
    } else {
        let g = Grid2D::new(dims[0], dims[1]).unwrap();
        Field2D::new(g, (0..dims[0] * dims[1]).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
            .into()
    };
    pool(&field, spec(mode, m), 0).unwrap()
}

fn random_batch(model: &DeepOnet, grid: &Grid, snapshots: usize, q: usize, seed_: u64) -> Batch {
    let mut rng = seed::rng(seed_);
    let arch = model.architecture();
    let width = arch.input_width();
    let inputs = Matrix::from_shape_fn((snapshots, width), |_| rng.gen_range(-2.0..2.0));
    let all = grid_coords(grid);
    let coords = Matrix::from_shape_fn((snapshots * q, arch.ndim()), |(i, d)| {
        all[[(i * 7 + 3) % all.nrows(), d]]
    });
    let targets = (0..snapshots * q).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Batch {
        inputs,
        coords,
        targets,
        shared_coords: false,
    }
}

#[test]
fn branch_input_width_follows_pooling() {
    let g = grid_1d(1024);
    for (m, w) in [(8, 128), (16, 64), (32, 32)] {
        let a = Architecture::kdvb(spec(PoolMode::Max, m), &g).unwrap();
        assert_eq!(a.input_width(), w);
    }
}

#[test]
fn parameter_count_closed_form_1d() {
    let a = Architecture::kdvb(spec(PoolMode::Average, 8), &grid_1d(1024)).unwrap();
    let model = build_deeponet_1d(a, 0).unwrap();
    let mlp = |widths: &[usize]| -> usize { widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum() };
    let expected = mlp(&[128, 256, 256, 256, 128]) + mlp(&[1, 128, 128, 128, 128]) + 1;
    assert_eq!(model.param_count(), expected);
    assert_eq!(model.params().iter().map(|p| p.len()).sum::<usize>(), expected);
}

#[test]
fn flatten_widths_2d() {
    let g = grid_2d(128);
    let a8 = Architecture::poisson(spec(PoolMode::Max, 8), &g).unwrap();
    assert_eq!(a8.flatten_width(), 15 * 15 * 40);
    assert_eq!(a8.flatten_width(), 9000);
    let a16 = Architecture::poisson(spec(PoolMode::Max, 16), &g).unwrap();
    assert_eq!(a16.flatten_width(), 1960);
    let a4 = Architecture::poisson(spec(PoolMode::Max, 4), &g).unwrap();
    assert_eq!(a4.input_dims, vec![32, 32]);
}

#[test]
fn too_small_2d_input_is_rejected() {
    let g = grid_2d(64);
    assert!(Architecture::poisson(spec(PoolMode::Max, 64), &g).is_err());
}

#[test]
fn mismatched_output_widths_are_rejected() {
    let mut a = small_1d(8);
    a.trunk_widths = vec![7, 6];
    assert!(DeepOnet::new(a, 0).is_err());
}

/// Force the final branch and trunk layers to emit constant vectors.
fn pin_outputs(model: &mut DeepOnet, b: &[f64], t: &[f64]) {
    for (net, v) in [(&mut model.branch, b), (&mut model.trunk, t)] {
        match net.layers.last_mut().unwrap() {
            Layer::Dense(d) => {
                d.weights.fill(0.0);
                d.biases = Array1::from(v.to_vec());
            }
            _ => unreachable!(),
        }
    }
}

#[test]
fn dot_product_combine() {
    let mut a = small_1d(8);
    a.branch_widths = vec![4, 3];
    a.trunk_widths = vec![4, 3];
    let mut model = DeepOnet::new(a, 1).unwrap();
    model.bias = 0.0;
    pin_outputs(&mut model, &[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]);
    let s = random_sample(&[64], PoolMode::Average, 8, 2);
    assert_eq!(model.forward(&s, &[3.0]).unwrap(), 32.0);

    pin_outputs(&mut model, &[0.0, 0.0, 0.0], &[4.0, 5.0, 6.0]);
    model.bias = -1.25;
    for y in [0.0, 2.5, 9.9] {
        assert_eq!(model.forward(&s, &[y]).unwrap(), -1.25);
    }
}

#[test]
fn forward_is_deterministic() {
    let model = DeepOnet::new(small_2d(), 3).unwrap();
    let s = random_sample(&[16, 16], PoolMode::Max, 4, 4);
    let a = model.forward(&s, &[0.3, 1.2]).unwrap();
    let b = model.forward(&s, &[0.3, 1.2]).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    let again = DeepOnet::new(small_2d(), 3).unwrap();
    assert_eq!(again, model);
}

#[test]
fn forward_rejects_bad_input() {
    let model = DeepOnet::new(small_1d(8), 3).unwrap();
    let wrong = random_sample(&[64], PoolMode::Average, 4, 1);
    assert!(matches!(model.forward(&wrong, &[1.0]), Err(Error::Shape(_))));
    let mut s = random_sample(&[64], PoolMode::Average, 8, 1);
    s.values[0] = f64::NAN;
    assert!(matches!(model.forward(&s, &[1.0]), Err(Error::NonFinite(_))));
}

#[test]
fn predict_field_matches_pointwise_forward() {
    for (model, grid, sample) in [
        (
            DeepOnet::new(small_1d(8), 5).unwrap(),
            grid_1d(64),
            random_sample(&[64], PoolMode::Average, 8, 6),
        ),
        (
            DeepOnet::new(small_2d(), 5).unwrap(),
            grid_2d(16),
            random_sample(&[16, 16], PoolMode::Max, 4, 6),
        ),
    ] {
        let field = model.predict_field(&sample, &grid).unwrap();
        assert_eq!(field.dims(), grid.dims());
        for k in 0..grid.len() {
            let direct = model.forward(&sample, &grid.point(k)).unwrap();
            assert!((field.values()[k] - direct).abs() <= 1e-12);
        }
    }
}

#[test]
fn full_resolution_field_from_coarse_input() {
    let a = Architecture::kdvb(spec(PoolMode::Max, 16), &grid_1d(1024)).unwrap();
    let model = DeepOnet::new(a, 0).unwrap();
    let s = random_sample(&[1024], PoolMode::Max, 16, 0);
    assert_eq!(s.values.len(), 64);
    let f = model.predict_field(&s, &grid_1d(1024)).unwrap();
    assert_eq!(f.values().len(), 1024);
}

#[test]
fn combine_is_linear_in_branch_output() {
    let mut model = DeepOnet::new(small_1d(8), 9).unwrap();
    model.bias = 0.7;
    let s = random_sample(&[64], PoolMode::Average, 8, 10);
    let base = model.forward(&s, &[4.2]).unwrap() - model.bias;
    let alpha = -2.5;
    match model.branch.layers.last_mut().unwrap() {
        Layer::Dense(d) => {
            d.weights.mapv_inplace(|w| w * alpha);
            d.biases.mapv_inplace(|b| b * alpha);
        }
        _ => unreachable!(),
    }
    let scaled = model.forward(&s, &[4.2]).unwrap() - model.bias;
    assert!((scaled - alpha * base).abs() <= 1e-12 * base.abs().max(1.0));
}

#[test]
fn replicated_unit_convolution_collapses_to_affine_map() {
    let a = Architecture::poisson(spec(PoolMode::Average, 8), &grid_2d(64)).unwrap();
    let model = build_deeponet_2d(a, 11).unwrap();
    let s = random_sample(&[64, 64], PoolMode::Average, 8, 12);
    let x = model.normalize_inputs(&[&s.values]).unwrap();
    let literal = opsr_core::nn::Sequential::new(model.branch.layers[..2].to_vec())
        .forward(&x)
        .unwrap();
    let conv = match &model.branch.layers[1] {
        Layer::Conv2d(c) => c,
        _ => unreachable!(),
    };
    let pixels = x.ncols();
    assert_eq!(conv.in_channels, 200);
    for o in 0..conv.out_channels() {
        let slope: f64 = conv.kernels.row(o).sum();
        for k in 0..pixels {
            let collapsed = slope * x[[0, k]] + conv.biases[o];
            assert!((literal[[0, o * pixels + k]] - collapsed).abs() < 1e-12);
        }
    }
}

#[test]
fn gradient_check_1d() {
    let model = DeepOnet::new(small_1d(8), 13).unwrap();
    let batch = random_batch(&model, &grid_1d(64), 3, 5, 14);
    let mut obj = DeepOnetObjective { model, batch };
    let report = grad_check(&mut obj, &GradCheckConfig::default()).unwrap();
    assert!(report.passes(1e-5), "{report:?}");
}

#[test]
fn gradient_check_2d() {
    let model = DeepOnet::new(small_2d(), 15).unwrap();
    let batch = random_batch(&model, &grid_2d(16), 4, 3, 16);
    let mut obj = DeepOnetObjective { model, batch };
    let report = grad_check(&mut obj, &GradCheckConfig::default()).unwrap();
    assert!(report.passes(1e-5), "{report:?}");
}

#[test]
fn normalization_is_frozen_into_predictions() {
    let mut model = DeepOnet::new(small_1d(8), 17).unwrap();
    let rows: Vec<Vec<f64>> = (0..6)
        .map(|i| (0..8).map(|k| (i * 8 + k) as f64).collect())
        .collect();
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    model.fit_normalization(&refs, &[10.0, 14.0]).unwrap();
    assert_eq!(model.input_mean[0], 20.0);
    assert_eq!(model.output_scale, 2.0);
    assert_eq!(model.bias, 12.0);
    let x = model.normalize_inputs(&refs).unwrap();
    for k in 0..8 {
        let col = x.column(k);
        assert!(col.sum().abs() < 1e-12);
    }
}

fn trained_looking(arch: Architecture, seed_: u64) -> DeepOnet {
    let mut model = DeepOnet::new(arch, seed_).unwrap();
    let mut rng = seed::rng(seed_ + 100);
    for p in model.params_mut() {
        for v in p.iter_mut() {
            *v += rng.gen_range(-0.01..0.01);
        }
    }
    model.output_scale = 3.5;
    let n = model.input_mean.len();
    model.input_mean = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    model.input_std = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    model
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for (i, (arch, grid, dims, mode, m)) in [
        (small_1d(8), grid_1d(64), vec![64], PoolMode::Average, 8),
        (small_2d(), grid_2d(16), vec![16, 16], PoolMode::Max, 4),
    ]
    .into_iter()
    .enumerate()
    {
        let mut model = trained_looking(arch, 20 + i as u64);
        let batch = random_batch(&model, &grid, 4, 3, 21);
        let step = model.loss_and_grad(&batch).unwrap();
        model.update_running_stats(&step);
        let mut adam = AdamState::for_params(&model.params());
        let cfg = Default::default();
        adam.step(&cfg, &mut model.params_mut(), &step.grads).unwrap();

        let path = dir.path().join(format!("m{i}.osrm"));
        model.save(&path, Some(&adam)).unwrap();
        let (loaded, loaded_adam) = DeepOnet::load(&path).unwrap();
        assert_eq!(loaded, model);
        assert_eq!(loaded_adam.as_ref(), Some(&adam));
        for (a, b) in loaded.params().iter().zip(model.params()) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let s = random_sample(&dims, mode, m, 22);
        let pa = model.predict_field(&s, &grid).unwrap();
        let pb = loaded.predict_field(&s, &grid).unwrap();
        assert!(pa
            .values()
            .iter()
            .zip(pb.values())
            .all(|(x, y)| x.to_bits() == y.to_bits()));

        let bare = DeepOnet::from_bytes(&model.to_bytes(None)).unwrap();
        assert!(bare.1.is_none());
        assert_eq!(bare.0, model);
    }
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let model = DeepOnet::new(small_1d(8), 30).unwrap();
    let bytes = model.to_bytes(None);

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(DeepOnet::from_bytes(&bad_magic), Err(Error::Format(m)) if m.contains("magic")));

    let mut bad_version = bytes.clone();
    bad_version[4] = 99;
    assert!(matches!(DeepOnet::from_bytes(&bad_version), Err(Error::Format(m)) if m.contains("version")));

    let truncated = &bytes[..bytes.len() - 20];
    assert!(matches!(DeepOnet::from_bytes(truncated), Err(Error::Format(_))));

    // Rewrite the parameter count to claim fewer floats than the descriptor implies.
    let desc_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let at = 9 + desc_len;
    let mut short = bytes[..at].to_vec();
    let n = model.param_count() - 3;
    short.extend_from_slice(&(n as u64).to_le_bytes());
    for _ in 0..n {
        short.extend_from_slice(&0f64.to_le_bytes());
    }
    let err = DeepOnet::from_bytes(&short).unwrap_err();
    assert!(err.to_string().contains("parameter"), "{err}");
}
