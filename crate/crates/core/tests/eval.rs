use opsr_core::deeponet::{Architecture, DeepOnet};
use opsr_core::eval::{
    cell_file_name, evaluate_baseline, evaluate_model, grey_levels, read_report_csv, sweep_cells,
    write_aggregates_csv, write_field_pgm, write_report_cells, write_report_csv, EvalRecord,
    EvalReport, Method, SweepAxes,
};
use opsr_core::field::{Field, Field1D, Field2D, Grid, Grid1D, Grid2D};
use opsr_core::pool::{PoolMode, PoolingSpec};
use opsr_core::spectral::Case;
use opsr_core::train::{split_indices, Dataset, Snapshot, SnapshotParams};
use proptest::prelude::*;

fn dataset_2d(f: impl Fn(f64, f64) -> f64 + Copy) -> Dataset {
    let g = Grid2D::new(32, 32).unwrap();
    let snapshots = (0..10)
        .map(|k| Snapshot {
            seed: k,
            params: SnapshotParams::Poisson,
            field: Field2D::from_fn(g, |x, y| (1.0 + 0.1 * k as f64) * f(x, y))
                .unwrap()
                .into(),
        })
        .collect();
    let (train, test) = split_indices(10, 0);
    Dataset {
        case: Case::Poisson,
        master_seed: 0,
        grid: Grid::TwoD(g),
        snapshots,
        train,
        test,
    }
}

fn record(snapshot_id: usize, method: Method, epsilon: f64) -> EvalRecord {
    EvalRecord {
        case: Case::Kdvb,
        pool_mode: PoolMode::Max,
        m: 16,
        n_train: 90,
        snapshot_id,
        method,
        epsilon,
    }
}

#[test]
fn constant_fields_are_reconstructed_exactly() {
    let ds = dataset_2d(|_, _| 2.5);
    for mode in PoolMode::ALL {
        let spec = PoolingSpec::new(mode, 4).unwrap();
        let report = evaluate_baseline(&ds, spec, 9).unwrap();
        assert_eq!(report.records.len(), 1);
        assert!(report.records[0].epsilon < 1e-14);
        assert_eq!(report.records[0].method, Method::Spline);
        assert_eq!(report.records[0].n_train, 9);
    }
}

#[test]
fn smooth_fields_have_small_average_pooling_error() {
    let ds = dataset_2d(|x, y| 2.0 + x.sin() * y.cos());
    let spec = PoolingSpec::new(PoolMode::Average, 4).unwrap();
    let eps = evaluate_baseline(&ds, spec, 9).unwrap().mean_epsilon("spline").unwrap();
    assert!(eps < 0.02, "{eps}");
}

#[test]
fn model_evaluation_checks_its_pooling() {
    let ds = dataset_2d(|x, y| x + y);
    let spec = PoolingSpec::new(PoolMode::Average, 4).unwrap();
    let mut arch = Architecture::poisson(spec, &ds.grid).unwrap();
    arch.conv_channels = [4, 4, 2];
    arch.branch_widths = vec![8, 8, 8, 4];
    arch.trunk_widths = vec![8, 8, 4];
    let model = DeepOnet::new(arch, 1).unwrap();
    let report = evaluate_model(&model, &ds, spec, 9).unwrap();
    assert_eq!(report.records.len(), ds.test.len());
    assert!(report.records.iter().all(|r| r.epsilon.is_finite()));
    let other = PoolingSpec::new(PoolMode::Max, 4).unwrap();
    assert!(evaluate_model(&model, &ds, other, 9).is_err());
}

#[test]
fn report_csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let report = EvalReport {
        records: vec![
            record(3, Method::DeepOnet, 0.012345678901234567),
            record(7, Method::Spline, 1e-9),
        ],
    };
    let path = dir.path().join("r.csv");
    write_report_csv(&report, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("case,pool_mode,M,n_train,snapshot_id,method,epsilon\n"));
    assert!(text.contains("kdvb,max,16,90,3,deeponet,"));
    assert_eq!(read_report_csv(&path).unwrap(), report);

    std::fs::write(&path, "a,b\n1,2\n").unwrap();
    assert!(read_report_csv(&path).is_err());
}

#[test]
fn aggregates_take_log_of_the_mean() {
    let report = EvalReport {
        records: vec![
            record(0, Method::Spline, 0.1),
            record(1, Method::Spline, 0.001),
            record(0, Method::DeepOnet, 0.01),
        ],
    };
    let aggs = report.aggregates();
    assert_eq!(aggs.len(), 2);
    let spline = aggs.iter().find(|a| a.method == Method::Spline).unwrap();
    assert_eq!(spline.count, 2);
    assert!((spline.mean - 0.0505).abs() < 1e-15);
    assert!((spline.log10_mean - 0.0505f64.log10()).abs() < 1e-15);
    assert_eq!(report.mean_epsilon("deeponet").unwrap(), 0.01);
    assert!(report.mean_epsilon("bogus").is_err());
    assert!(EvalReport::default().mean_epsilon("spline").is_err());
}

#[test]
fn report_cells_and_aggregates_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let report = EvalReport {
        records: vec![record(0, Method::Spline, 0.1), record(0, Method::DeepOnet, 0.01)],
    };
    let paths = write_report_cells(&report, dir.path()).unwrap();
    assert_eq!(paths.len(), 2);
    assert!(paths
        .iter()
        .any(|p| p.ends_with(cell_file_name(Case::Kdvb, PoolMode::Max, 16, 90, Method::Spline))));
    let agg = dir.path().join("agg.csv");
    write_aggregates_csv(&report, &agg).unwrap();
    let text = std::fs::read_to_string(agg).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert_eq!(
        cell_file_name(Case::Poisson, PoolMode::Average, 8, 45, Method::DeepOnet),
        "poisson_avg_M8_n45_deeponet.csv"
    );
}

#[test]
fn grey_levels_span_the_byte_range() {
    assert_eq!(grey_levels(&[3.0, 3.0, 3.0]), vec![128; 3]);
    assert_eq!(grey_levels(&[-1.0, 0.0, 1.0]), vec![0, 128, 255]);
}

#[test]
fn pgm_files_have_a_p5_header() {
    let dir = tempfile::tempdir().unwrap();
    let g = Grid2D::new(8, 4).unwrap();
    let f: Field = Field2D::from_fn(g, |_, y| y).unwrap().into();
    let path = dir.path().join("f.pgm");
    write_field_pgm(&f, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let header = b"P5 8 4 255\n";
    assert_eq!(&bytes[..header.len()], header);
    let pixels = &bytes[header.len()..];
    assert_eq!(pixels.len(), 32);
    // Largest y on the top row.
    assert!(pixels[..8].iter().all(|&p| p == 255));
    assert!(pixels[24..].iter().all(|&p| p == 0));

    let g1 = Grid1D::new(16, 0.0, 10.0, true).unwrap();
    let f1: Field = Field1D::from_fn(g1, |x| x).unwrap().into();
    let path = dir.path().join("g.pgm");
    write_field_pgm(&f1, &path).unwrap();
    assert!(std::fs::read(&path).unwrap().starts_with(b"P5 16 1 255\n"));
    let csv = std::fs::read_to_string(dir.path().join("g.csv")).unwrap();
    assert_eq!(csv.lines().count(), 17);
}

#[test]
fn sweep_cells_cover_the_axes_with_distinct_seeds() {
    let ds = dataset_2d(|x, _| x);
    let axes = SweepAxes {
        modes: PoolMode::ALL.to_vec(),
        windows: vec![4, 8],
        sizes: vec![3, 9],
    };
    let cells = sweep_cells(&ds, &axes, 5).unwrap();
    assert_eq!(cells.len(), 8);
    let mut seeds: Vec<u64> = cells.iter().map(|c| c.seed).collect();
    seeds.sort();
    seeds.dedup();
    assert_eq!(seeds.len(), 8);
    assert_eq!(cells, sweep_cells(&ds, &axes, 5).unwrap());

    let too_big = SweepAxes { sizes: vec![10], ..axes.clone() };
    assert!(sweep_cells(&ds, &too_big, 5).is_err());
    let bad_window = SweepAxes { windows: vec![5], ..axes };
    assert!(sweep_cells(&ds, &bad_window, 5).is_err());

    let defaults = SweepAxes::defaults(Case::Poisson, 100);
    assert_eq!(defaults.windows, vec![4, 8, 16]);
    assert_eq!(defaults.sizes, vec![45, 90]);
    assert_eq!(SweepAxes::defaults(Case::Kdvb, 900).windows, vec![8, 16, 32]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aggregate_mean_ignores_record_order(
        eps in prop::collection::vec(1e-6f64..1.0, 1..30),
        rot in 0usize..30,
    ) {
        let records: Vec<EvalRecord> = eps
            .iter()
            .enumerate()
            .map(|(i, &e)| record(i, Method::Spline, e))
            .collect();
        let mut shuffled = records.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let a = EvalReport { records }.aggregates();
        let b = EvalReport { records: shuffled }.aggregates();
        prop_assert_eq!(a, b);
    }
}
