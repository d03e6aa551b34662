//! Test-set evaluation, baseline comparison, sweeps and report/image output.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::deeponet::{Architecture, DeepOnet};
use crate::field::{relative_l2_error, Field, Grid};
use crate::pool::{pool, PoolMode, PoolingSpec};
use crate::seed;
use crate::spectral::Case;
use crate::spline::{bicubic_reconstruct_2d, spline_reconstruct_1d};
use crate::train::{train, Dataset, TrainConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    DeepOnet,
    /// Cubic spline (1D) or bicubic (2D) interpolation.
    Spline,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::DeepOnet => "deeponet",
            Method::Spline => "spline",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deeponet" => Ok(Method::DeepOnet),
            "spline" => Ok(Method::Spline),
            other => Err(Error::InvalidParameter(format!("unknown method {other:?}"))),
        }
    }
}

/// Relative L2 error of one method on one test snapshot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRecord {
    pub case: Case,
    pub pool_mode: PoolMode,
    pub m: usize,
    pub n_train: usize,
    pub snapshot_id: usize,
    pub method: Method,
    pub epsilon: f64,
}

/// Mean error of one `(case, method, mode, M, n_train)` cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub case: Case,
    pub method: Method,
    pub pool_mode: PoolMode,
    pub m: usize,
    pub n_train: usize,
    pub count: usize,
    pub mean: f64,
    /// `log10` of the mean, not the mean of logs.
    pub log10_mean: f64,
}

type CellKey = (&'static str, Method, &'static str, usize, usize);

fn cell_key(r: &EvalRecord) -> CellKey {
    (r.case.name(), r.method, r.pool_mode.name(), r.m, r.n_train)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    pub fn extend(&mut self, other: EvalReport) {
        self.records.extend(other.records);
    }

    /// Per-cell aggregates, sorted by cell.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut cells: BTreeMap<CellKey, (EvalRecord, Vec<f64>)> = BTreeMap::new();
        for r in &self.records {
            cells
                .entry(cell_key(r))
                .or_insert_with(|| (*r, Vec::new()))
                .1
                .push(r.epsilon);
        }
        cells
            .into_values()
            .map(|(r, mut eps)| {
                // Sorting makes the sum independent of record order.
                eps.sort_by(f64::total_cmp);
                let mean = eps.iter().sum::<f64>() / eps.len() as f64;
                Aggregate {
                    case: r.case,
                    method: r.method,
                    pool_mode: r.pool_mode,
                    m: r.m,
                    n_train: r.n_train,
                    count: eps.len(),
                    mean,
                    log10_mean: mean.log10(),
                }
            })
            .collect()
    }

    /// Mean error over every record of `method`.
    pub fn mean_epsilon(&self, method: &str) -> Result<f64> {
        let method: Method = method.parse()?;
        let mut eps: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.method == method)
            .map(|r| r.epsilon)
            .collect();
        if eps.is_empty() {
            return Err(Error::Empty("no records for method"));
        }
        eps.sort_by(f64::total_cmp);
        Ok(eps.iter().sum::<f64>() / eps.len() as f64)
    }
}

fn record(dataset: &Dataset, spec: PoolingSpec, n_train: usize, id: usize, method: Method, epsilon: f64) -> EvalRecord {
    EvalRecord {
        case: dataset.case,
        pool_mode: spec.mode,
        m: spec.window,
        n_train,
        snapshot_id: id,
        method,
        epsilon,
    }
}

/// DeepONet error on every test snapshot.
pub fn evaluate_model(
    model: &DeepOnet,
    dataset: &Dataset,
    spec: PoolingSpec,
    n_train: usize,
) -> Result<EvalReport> {
    let arch = model.architecture();
    if arch.pooling != spec || arch.case != dataset.case {
        return Err(Error::InvalidParameter(format!(
            "model trained for {} {} M={} cannot evaluate {} {} M={}",
            arch.case, arch.pooling.mode, arch.pooling.window, dataset.case, spec.mode, spec.window
        )));
    }
    spec.check(&dataset.grid.dims())?;
    let trunk = model.trunk_features(&dataset.grid)?;
    let records = dataset
        .test
        .par_iter()
        .map(|&id| {
            let target = &dataset.snapshots[id].field;
            let input = pool(target, spec, id)?;
            let pred = model.predict_with_trunk(&input, &trunk, &dataset.grid)?;
            let eps = relative_l2_error(target, &pred)?;
            Ok(record(dataset, spec, n_train, id, Method::DeepOnet, eps))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { records })
}

/// Interpolate a pooled field back onto its high-resolution grid.
pub fn spline_reconstruct(field: &Field, spec: PoolingSpec, id: usize) -> Result<Field> {
    let input = pool(field, spec, id)?;
    Ok(match field {
        Field::OneD(f) => spline_reconstruct_1d(&input, f.grid())?.0.into(),
        Field::TwoD(f) => bicubic_reconstruct_2d(&input, f.grid())?.0.into(),
    })
}

/// Spline-baseline error on every test snapshot.
pub fn evaluate_baseline(dataset: &Dataset, spec: PoolingSpec, n_train: usize) -> Result<EvalReport> {
    spec.check(&dataset.grid.dims())?;
    let records = dataset
        .test
        .par_iter()
        .map(|&id| {
            let target = &dataset.snapshots[id].field;
            let pred = spline_reconstruct(target, spec, id)?;
            let eps = relative_l2_error(target, &pred)?;
            Ok(record(dataset, spec, n_train, id, Method::Spline, eps))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { records })
}

/// Grid of experiments: every mode × window × training-set size.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepAxes {
    pub modes: Vec<PoolMode>,
    pub windows: Vec<usize>,
    pub sizes: Vec<usize>,
}

pub const DEFAULT_SIZES: [usize; 5] = [45, 90, 225, 450, 900];

impl SweepAxes {
    /// The standard axes for `case`, with sizes cut to what `available` allows.
    pub fn defaults(case: Case, available: usize) -> Self {
        Self {
            modes: PoolMode::ALL.to_vec(),
            windows: match case {
                Case::Kdvb => vec![8, 16, 32],
                Case::Poisson => vec![4, 8, 16],
            },
            sizes: DEFAULT_SIZES
                .iter()
                .copied()
                .filter(|&n| n <= available)
                .collect(),
        }
    }
}

/// One trained-and-evaluated cell of a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SweepCell {
    pub mode: PoolMode,
    pub m: usize,
    pub n_train: usize,
    /// Seed used for both model initialization and batching.
    pub seed: u64,
}

impl SweepCell {
    pub fn spec(&self) -> Result<PoolingSpec> {
        PoolingSpec::new(self.mode, self.m)
    }
}

/// Expand the axes into seeded cells, checking them against the dataset.
pub fn sweep_cells(dataset: &Dataset, axes: &SweepAxes, master_seed: u64) -> Result<Vec<SweepCell>> {
    if axes.modes.is_empty() || axes.windows.is_empty() || axes.sizes.is_empty() {
        return Err(Error::Empty("sweep axis"));
    }
    if let Some(&n) = axes.sizes.iter().find(|&&n| n == 0 || n > dataset.train.len()) {
        return Err(Error::InvalidParameter(format!(
            "training size {n} not available: dataset has {} training snapshots",
            dataset.train.len()
        )));
    }
    let mut cells = Vec::new();
    for &mode in &axes.modes {
        for &m in &axes.windows {
            PoolingSpec::new(mode, m)?.check(&dataset.grid.dims())?;
            for &n_train in &axes.sizes {
                let seed = seed::derive(
                    master_seed,
                    &[mode as u64, m as u64, n_train as u64],
                );
                cells.push(SweepCell {
                    mode,
                    m,
                    n_train,
                    seed,
                });
            }
        }
    }
    Ok(cells)
}

/// Train one model and evaluate both methods for a cell.
pub fn run_cell(
    dataset: &Dataset,
    cell: &SweepCell,
    architecture: &(dyn Fn(PoolingSpec, &Grid) -> Result<Architecture> + Sync),
    train_config: &TrainConfig,
) -> Result<EvalReport> {
    let spec = cell.spec()?;
    let subset = dataset.with_train_size(cell.n_train)?;
    let model = DeepOnet::new(architecture(spec, &dataset.grid)?, cell.seed)?;
    let config = TrainConfig {
        seed: cell.seed,
        checkpoint_every: 0,
        checkpoint_path: None,
        ..train_config.clone()
    };
    let outcome = train(model, &subset, spec, &config)?;
    let mut report = evaluate_model(&outcome.model, &subset, spec, cell.n_train)?;
    report.extend(evaluate_baseline(&subset, spec, cell.n_train)?);
    Ok(report)
}

/// Run every cell of the sweep and combine the reports.
pub fn sweep(
    dataset: &Dataset,
    axes: &SweepAxes,
    architecture: &(dyn Fn(PoolingSpec, &Grid) -> Result<Architecture> + Sync),
    train_config: &TrainConfig,
) -> Result<EvalReport> {
    let cells = sweep_cells(dataset, axes, train_config.seed)?;
    let reports = cells
        .par_iter()
        .map(|cell| run_cell(dataset, cell, architecture, train_config))
        .collect::<Result<Vec<_>>>()?;
    let mut out = EvalReport::default();
    for r in reports {
        out.extend(r);
    }
    Ok(out)
}

const HEADER: [&str; 7] = ["case", "pool_mode", "M", "n_train", "snapshot_id", "method", "epsilon"];

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_report_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(HEADER).map_err(csv_err(path))?;
    for r in &report.records {
        w.write_record([
            r.case.name().to_string(),
            r.pool_mode.name().to_string(),
            r.m.to_string(),
            r.n_train.to_string(),
            r.snapshot_id.to_string(),
            r.method.name().to_string(),
            r.epsilon.to_string(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_report_csv(path: &Path) -> Result<EvalReport> {
    let mut rd = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = rd.headers().map_err(csv_err(path))?.clone();
    if header.iter().ne(HEADER) {
        return Err(Error::Format(format!(
            "{}: unexpected header {:?}",
            path.display(),
            header
        )));
    }
    let mut records = Vec::new();
    for row in rd.records() {
        let row = row.map_err(csv_err(path))?;
        let bad = |what: &str| Error::Format(format!("{}: bad {what} in {:?}", path.display(), row));
        records.push(EvalRecord {
            case: row[0].parse().map_err(|_| bad("case"))?,
            pool_mode: row[1].parse().map_err(|_| bad("pool_mode"))?,
            m: row[2].parse().map_err(|_| bad("M"))?,
            n_train: row[3].parse().map_err(|_| bad("n_train"))?,
            snapshot_id: row[4].parse().map_err(|_| bad("snapshot_id"))?,
            method: row[5].parse().map_err(|_| bad("method"))?,
            epsilon: row[6].parse().map_err(|_| bad("epsilon"))?,
        });
    }
    Ok(EvalReport { records })
}

/// File name of one sweep cell's per-method CSV.
pub fn cell_file_name(case: Case, mode: PoolMode, m: usize, n_train: usize, method: Method) -> String {
    format!("{case}_{mode}_M{m}_n{n_train}_{method}.csv")
}

/// Write one CSV per `(case, mode, M, n_train, method)` cell into `dir`.
pub fn write_report_cells(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut cells: BTreeMap<CellKey, EvalReport> = BTreeMap::new();
    for r in &report.records {
        cells.entry(cell_key(r)).or_default().records.push(*r);
    }
    let mut paths = Vec::new();
    for cell in cells.values() {
        let r = cell.records[0];
        let path = dir.join(cell_file_name(r.case, r.pool_mode, r.m, r.n_train, r.method));
        write_report_csv(cell, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Write per-cell aggregates as CSV.
pub fn write_aggregates_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["case", "pool_mode", "M", "n_train", "method", "count", "mean_epsilon", "log10_mean_epsilon"])
        .map_err(csv_err(path))?;
    for a in report.aggregates() {
        w.write_record([
            a.case.name().to_string(),
            a.pool_mode.name().to_string(),
            a.m.to_string(),
            a.n_train.to_string(),
            a.method.name().to_string(),
            a.count.to_string(),
            a.mean.to_string(),
            a.log10_mean.to_string(),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// 8-bit grey levels after min-max normalization; a flat field maps to 128.
pub fn grey_levels(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![128; values.len()];
    }
    values
        .iter()
        .map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
        .collect()
}

/// Binary P5 image of a field.
///
/// 2D fields put the largest y on the top row. 1D fields become a single-row
/// image plus a `.csv` of `(x, value)` pairs next to it.
pub fn write_field_pgm(field: &Field, path: &Path) -> Result<()> {
    let (w, h, pixels) = match field {
        Field::OneD(f) => (f.values().len(), 1, grey_levels(f.values())),
        Field::TwoD(f) => {
            let (nx, ny) = (f.grid().nx(), f.grid().ny());
            let grey = grey_levels(f.values());
            let mut flipped = Vec::with_capacity(grey.len());
            for j in (0..ny).rev() {
                flipped.extend_from_slice(&grey[j * nx..(j + 1) * nx]);
            }
            (nx, ny, flipped)
        }
    };
    let mut bytes = format!("P5 {w} {h} 255\n").into_bytes();
    bytes.extend_from_slice(&pixels);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    if let Field::OneD(f) = field {
        let companion = path.with_extension("csv");
        let mut w = csv::Writer::from_path(&companion).map_err(csv_err(&companion))?;
        w.write_record(["x", "value"]).map_err(csv_err(&companion))?;
        for (x, v) in f.grid().coords().iter().zip(f.values()) {
            w.write_record([x.to_string(), v.to_string()])
                .map_err(csv_err(&companion))?;
        }
        w.flush().map_err(|e| Error::io(&companion, e))?;
    }
    Ok(())
}
