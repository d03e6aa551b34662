//! Datasets of high-resolution snapshots, their file format, and the
//! mini-batch training loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::deeponet::{grid_coords, Batch, DeepOnet};
use crate::eval::evaluate_model;
use crate::field::{Field, Field1D, Field2D, Grid, Grid1D, Grid2D};
use crate::nn::{AdamConfig, AdamState, Matrix};
use crate::pool::{pool, PooledSample, PoolingSpec};
use crate::seed;
use crate::spectral::{
    sample_kdvb_params, sample_poisson_source, solve_kdvb, solve_poisson, Case, KdvbParams,
    KdvbSolverConfig,
};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"OSRD";
const VERSION: u8 = 1;

/// Generation parameters of one snapshot.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SnapshotParams {
    Kdvb(KdvbParams),
    /// Poisson sources are fully determined by the snapshot seed.
    Poisson,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub seed: u64,
    pub params: SnapshotParams,
    pub field: Field,
}

/// A low/high-resolution training pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SRPair {
    pub input: PooledSample,
    pub target: Field,
    pub snapshot_id: usize,
    pub params: SnapshotParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub case: Case,
    pub master_seed: u64,
    pub grid: Grid,
    pub snapshots: Vec<Snapshot>,
    /// Training indices in seeded order; prefixes are nested subsets.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Solver settings used when generating a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationConfig {
    pub kdvb: KdvbSolverConfig,
    pub poisson_grid: Grid2D,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            kdvb: KdvbSolverConfig::default(),
            poisson_grid: Grid2D::new(128, 128).expect("valid default grid"),
        }
    }
}

fn snapshot_seed(master: u64, index: usize) -> u64 {
    seed::derive(master, &[index as u64])
}

/// Seeded split: the last `n / 10` entries of a permutation form the test set.
pub fn split_indices(n: usize, master_seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng_for(master_seed, &[u64::MAX]));
    let n_test = n / 10;
    let test = order.split_off(n - n_test);
    (order, test)
}

fn generate_one(case: Case, seed: u64, config: &GenerationConfig) -> Result<Snapshot> {
    Ok(match case {
        Case::Kdvb => {
            let params = sample_kdvb_params(seed);
            Snapshot {
                seed,
                params: SnapshotParams::Kdvb(params),
                field: solve_kdvb(&params, &config.kdvb)?.into(),
            }
        }
        Case::Poisson => {
            let instance = sample_poisson_source(seed, &config.poisson_grid);
            Snapshot {
                seed,
                params: SnapshotParams::Poisson,
                field: solve_poisson(&instance, &config.poisson_grid)?.into(),
            }
        }
    })
}

/// Solve `n_snapshots` independent problems and split them 90/10.
pub fn generate_dataset(
    case: Case,
    n_snapshots: usize,
    master_seed: u64,
    config: &GenerationConfig,
) -> Result<Dataset> {
    if n_snapshots < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 snapshots, got {n_snapshots}"
        )));
    }
    let grid = match case {
        Case::Kdvb => {
            config.kdvb.validate()?;
            Grid::OneD(config.kdvb.grid()?)
        }
        Case::Poisson => Grid::TwoD(config.poisson_grid),
    };
    let snapshots = (0..n_snapshots)
        .into_par_iter()
        .map(|index| {
            let seed = snapshot_seed(master_seed, index);
            generate_one(case, seed, config).map_err(|e| Error::Snapshot {
                index,
                seed,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (train, test) = split_indices(n_snapshots, master_seed);
    Ok(Dataset {
        case,
        master_seed,
        grid,
        snapshots,
        train,
        test,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn pair(&self, index: usize, spec: PoolingSpec) -> Result<SRPair> {
        let snap = self.snapshots.get(index).ok_or_else(|| {
            Error::InvalidParameter(format!("snapshot {index} out of range {}", self.len()))
        })?;
        Ok(SRPair {
            input: pool(&snap.field, spec, index)?,
            target: snap.field.clone(),
            snapshot_id: index,
            params: snap.params,
        })
    }

    /// The same data with the training list cut to its first `n` entries.
    pub fn with_train_size(&self, n: usize) -> Result<Dataset> {
        if n == 0 || n > self.train.len() {
            return Err(Error::InvalidParameter(format!(
                "requested {n} training snapshots, {} available",
                self.train.len()
            )));
        }
        let mut out = self.clone();
        out.train.truncate(n);
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(match self.case {
            Case::Kdvb => 0,
            Case::Poisson => 1,
        });
        out.extend_from_slice(&self.master_seed.to_le_bytes());
        let dims = self.grid.dims();
        out.push(dims.len() as u8);
        for d in &dims {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for (lo, hi) in self.grid.bounds() {
            out.extend_from_slice(&lo.to_le_bytes());
            out.extend_from_slice(&hi.to_le_bytes());
        }
        out.extend_from_slice(&(self.snapshots.len() as u64).to_le_bytes());
        for snap in &self.snapshots {
            out.extend_from_slice(&snap.seed.to_le_bytes());
            if let SnapshotParams::Kdvb(p) = snap.params {
                out.extend_from_slice(&p.visc_a.to_le_bytes());
                out.extend_from_slice(&p.disp_b.to_le_bytes());
                out.extend_from_slice(&p.soliton_n.to_le_bytes());
            }
            for v in snap.field.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset version {version} (expected {VERSION})"
            )));
        }
        let case = match r.u8()? {
            0 => Case::Kdvb,
            1 => Case::Poisson,
            t => return Err(Error::Format(format!("unknown case tag {t}"))),
        };
        let master_seed = r.u64()?;
        let ndim = r.u8()? as usize;
        if ndim != case.ndim() {
            return Err(Error::Format(format!("{case} data cannot have {ndim} dimensions")));
        }
        let dims: Vec<usize> = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        let bounds: Vec<(f64, f64)> = (0..ndim)
            .map(|_| Ok((r.f64()?, r.f64()?)))
            .collect::<Result<_>>()?;
        let grid = match case {
            Case::Kdvb => Grid::OneD(Grid1D::new(dims[0], bounds[0].0, bounds[0].1, true)?),
            Case::Poisson => Grid::TwoD(Grid2D::new(dims[0], dims[1])?),
        };
        if grid.bounds() != bounds {
            return Err(Error::Format(format!("unexpected domain bounds {bounds:?}")));
        }
        let n = r.u64()? as usize;
        let len = grid.len();
        let per_snapshot = 8 + 8 * len + if case == Case::Kdvb { 20 } else { 0 };
        if n.checked_mul(per_snapshot) != Some(bytes.len() - r.pos) {
            return Err(Error::Format(format!(
                "header announces {n} snapshots of {per_snapshot} bytes but {} bytes follow",
                bytes.len() - r.pos
            )));
        }
        let mut snapshots = Vec::with_capacity(n);
        for _ in 0..n {
            let seed = r.u64()?;
            let params = match case {
                Case::Kdvb => SnapshotParams::Kdvb(KdvbParams {
                    visc_a: r.f64()?,
                    disp_b: r.f64()?,
                    soliton_n: i32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")),
                    seed,
                }),
                Case::Poisson => SnapshotParams::Poisson,
            };
            let values = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let field = match &grid {
                Grid::OneD(g) => Field1D::new(*g, values)?.into(),
                Grid::TwoD(g) => Field2D::new(*g, values)?.into(),
            };
            snapshots.push(Snapshot {
                seed,
                params,
                field,
            });
        }
        let (train, test) = split_indices(n, master_seed);
        Ok(Dataset {
            case,
            master_seed,
            grid,
            snapshots,
            train,
            test,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
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
                "dataset truncated at byte {}",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub snapshots_per_batch: usize,
    /// High-resolution query points drawn per snapshot and step.
    pub points_per_snapshot: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Evaluate the test set every this many epochs (0 disables).
    pub eval_every: usize,
    /// Write a checkpoint every this many epochs (0 disables).
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    /// Fit input/output normalization on the training split before the first step.
    pub fit_normalization: bool,
    /// Replace batch-norm running statistics by training-set statistics at the end.
    pub recalibrate_batchnorm: bool,
    /// Draw one set of query points per step and use it for every snapshot in
    /// the batch, so the trunk runs once per step instead of once per snapshot.
    pub shared_points: bool,
    /// Cosine-anneal the learning rate from `adam.lr` down to this value over
    /// the run (`None` keeps it constant).
    pub final_lr: Option<f64>,
    /// Passes over the snapshot groups per epoch, each drawing fresh query points.
    pub point_rounds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            snapshots_per_batch: 16,
            points_per_snapshot: 128,
            adam: AdamConfig::default(),
            seed: 0,
            eval_every: 0,
            checkpoint_every: 0,
            checkpoint_path: None,
            fit_normalization: true,
            recalibrate_batchnorm: true,
            shared_points: false,
            final_lr: None,
            point_rounds: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, grid: &Grid) -> Result<()> {
        if self.epochs == 0
            || self.snapshots_per_batch == 0
            || self.points_per_snapshot == 0
            || self.point_rounds == 0
        {
            return Err(Error::InvalidParameter(
                "epochs, snapshots per batch, points per snapshot and point rounds must be positive"
                    .into(),
            ));
        }
        if self.points_per_snapshot > grid.len() {
            return Err(Error::InvalidParameter(format!(
                "{} points per snapshot exceeds the {} grid points",
                self.points_per_snapshot,
                grid.len()
            )));
        }
        if self.checkpoint_every > 0 && self.checkpoint_path.is_none() {
            return Err(Error::InvalidParameter(
                "checkpoint cadence set without a checkpoint path".into(),
            ));
        }
        if let Some(lr) = self.final_lr {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::InvalidParameter(format!("final learning rate {lr} must be finite and >= 0")));
            }
        }
        self.adam.validate()
    }

    /// Adam settings in effect during `epoch` (1-based).
    pub fn adam_for_epoch(&self, epoch: usize) -> AdamConfig {
        let mut adam = self.adam;
        if let Some(end) = self.final_lr {
            let progress = if self.epochs > 1 {
                (epoch.saturating_sub(1)) as f64 / (self.epochs - 1) as f64
            } else {
                1.0
            };
            let w = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            adam.lr = end + (self.adam.lr - end) * w;
        }
        adam
    }
}

/// Pooled training inputs and targets, prepared once per run.
pub struct TrainingSet {
    ids: Vec<usize>,
    inputs: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
    coords: Matrix,
}

impl TrainingSet {
    pub fn new(dataset: &Dataset, spec: PoolingSpec) -> Result<Self> {
        spec.check(&dataset.grid.dims())?;
        let mut inputs = Vec::with_capacity(dataset.train.len());
        let mut targets = Vec::with_capacity(dataset.train.len());
        for &i in &dataset.train {
            let pair = dataset.pair(i, spec)?;
            inputs.push(pair.input.values);
            targets.push(pair.target.values().to_vec());
        }
        Ok(Self {
            ids: dataset.train.clone(),
            inputs,
            targets,
            coords: grid_coords(&dataset.grid),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn input_rows(&self) -> Vec<&[f64]> {
        self.inputs.iter().map(Vec::as_slice).collect()
    }

    fn all_targets(&self) -> Vec<f64> {
        self.targets.concat()
    }

    /// Snapshot groups for one epoch, as positions into the training list.
    fn epoch_groups(&self, config: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut seed::rng_for(config.seed, &[0, epoch as u64]));
        let mut groups: Vec<Vec<usize>> = order
            .chunks(config.snapshots_per_batch)
            .map(<[usize]>::to_vec)
            .collect();
        // A lone trailing snapshot would leave batch-norm without a batch.
        if groups.len() > 1 && groups.last().is_some_and(|g| g.len() == 1) {
            let last = groups.pop().expect("non-empty");
            groups.last_mut().expect("non-empty").extend(last);
        }
        let rounds = groups.len() * config.point_rounds;
        groups.into_iter().cycle().take(rounds).collect()
    }

    /// The batches of `epoch`, in step order.
    pub fn batches(&self, config: &TrainConfig, epoch: usize) -> Vec<Batch> {
        let q = config.points_per_snapshot;
        let n_points = self.coords.nrows();
        let ndim = self.coords.ncols();
        self.epoch_groups(config, epoch)
            .into_iter()
            .enumerate()
            .map(|(step, group)| {
                let mut rng = seed::rng_for(config.seed, &[1, epoch as u64, step as u64]);
                let width = self.inputs[group[0]].len();
                let mut inputs = Matrix::zeros((group.len(), width));
                let coord_rows = if config.shared_points { q } else { group.len() * q };
                let mut coords = Matrix::zeros((coord_rows, ndim));
                let mut targets = Vec::with_capacity(group.len() * q);
                let shared = config
                    .shared_points
                    .then(|| sample(&mut rng, n_points, q).into_vec());
                if let Some(points) = &shared {
                    for (j, &p) in points.iter().enumerate() {
                        coords.row_mut(j).assign(&self.coords.row(p));
                    }
                }
                for (s, &k) in group.iter().enumerate() {
                    inputs
                        .row_mut(s)
                        .assign(&ndarray::ArrayView1::from(&self.inputs[k]));
                    let points = match &shared {
                        Some(points) => points.clone(),
                        None => sample(&mut rng, n_points, q).into_vec(),
                    };
                    for (j, p) in points.into_iter().enumerate() {
                        if shared.is_none() {
                            coords.row_mut(s * q + j).assign(&self.coords.row(p));
                        }
                        targets.push(self.targets[k][p]);
                    }
                }
                Batch {
                    inputs,
                    coords,
                    targets,
                    shared_coords: config.shared_points,
                }
            })
            .collect()
    }

    /// Dataset snapshot ids in each batch of `epoch`.
    pub fn batch_snapshot_ids(&self, config: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
        self.epoch_groups(config, epoch)
            .into_iter()
            .map(|g| g.into_iter().map(|k| self.ids[k]).collect())
            .collect()
    }
}

/// Batches of one epoch over the training split.
pub fn assemble_batches(
    dataset: &Dataset,
    spec: PoolingSpec,
    config: &TrainConfig,
    epoch: usize,
) -> Result<Vec<Batch>> {
    config.validate(&dataset.grid)?;
    Ok(TrainingSet::new(dataset, spec)?.batches(config, epoch))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub mean_loss: f64,
    pub test_epsilon: Option<f64>,
}

pub struct TrainOutcome {
    pub model: DeepOnet,
    pub history: Vec<HistoryRow>,
    pub adam: AdamState,
}

pub fn train(
    model: DeepOnet,
    dataset: &Dataset,
    spec: PoolingSpec,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_progress(model, dataset, spec, config, |_| {})
}

/// Minimize batch MSE with Adam, reporting each finished epoch to `progress`.
pub fn train_with_progress(
    mut model: DeepOnet,
    dataset: &Dataset,
    spec: PoolingSpec,
    config: &TrainConfig,
    mut progress: impl FnMut(&HistoryRow),
) -> Result<TrainOutcome> {
    config.validate(&dataset.grid)?;
    let arch = model.architecture();
    if arch.pooling.window != spec.window || arch.case != dataset.case {
        return Err(Error::InvalidParameter(format!(
            "model built for {} M={} cannot train on {} M={}",
            arch.case, arch.pooling.window, dataset.case, spec.window
        )));
    }
    let set = TrainingSet::new(dataset, spec)?;
    if set.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if config.fit_normalization {
        model.fit_normalization(&set.input_rows(), &set.all_targets())?;
    }
    let mut adam = AdamState::for_params(&model.params());
    let mut history = Vec::with_capacity(config.epochs);
    let mut last_good = model.clone();
    for epoch in 1..=config.epochs {
        let mut total = 0.0;
        let adam_config = config.adam_for_epoch(epoch);
        let batches = set.batches(config, epoch);
        let n_batches = batches.len();
        for (step, batch) in batches.into_iter().enumerate() {
            let out = model.loss_and_grad(&batch);
            let out = match out {
                Ok(o) if o.loss.is_finite() => o,
                Ok(o) => {
                    return Err(diverged(&last_good, config, epoch, step, format!("loss {}", o.loss)))
                }
                Err(Error::NonFinite(detail)) => {
                    return Err(diverged(&last_good, config, epoch, step, detail))
                }
                Err(e) => return Err(e),
            };
            if let Err(e) = adam.step(&adam_config, &mut model.params_mut(), &out.grads) {
                return Err(match e {
                    Error::NonFinite(detail) => diverged(&last_good, config, epoch, step, detail),
                    e => e,
                });
            }
            model.update_running_stats(&out);
            total += out.loss;
        }
        last_good = model.clone();
        let test_epsilon = if config.eval_every > 0 && epoch % config.eval_every == 0 {
            let mut probe = model.clone();
            if config.recalibrate_batchnorm {
                probe.recalibrate_batchnorm(&set.input_rows())?;
            }
            Some(evaluate_model(&probe, dataset, spec, set.len())?.mean_epsilon("deeponet")?)
        } else {
            None
        };
        let row = HistoryRow {
            epoch,
            mean_loss: total / n_batches as f64,
            test_epsilon,
        };
        progress(&row);
        history.push(row);
        if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
            if let Some(path) = &config.checkpoint_path {
                model.save(path, Some(&adam))?;
            }
        }
    }
    if config.recalibrate_batchnorm {
        model.recalibrate_batchnorm(&set.input_rows())?;
    }
    if let Some(path) = &config.checkpoint_path {
        model.save(path, Some(&adam))?;
    }
    Ok(TrainOutcome {
        model,
        history,
        adam,
    })
}

fn diverged(last_good: &DeepOnet, config: &TrainConfig, epoch: usize, step: usize, detail: String) -> Error {
    if let Some(path) = &config.checkpoint_path {
        // Best effort: the error itself carries the model if the write fails.
        let _ = last_good.save(path, None);
    }
    Error::Diverged {
        epoch,
        step,
        detail,
        last_good: Box::new(last_good.clone()),
    }
}

pub fn write_history_csv(history: &[HistoryRow], path: &Path) -> Result<()> {
    let mut out = String::from("epoch,mean_loss,test_epsilon\n");
    for row in history {
        let eps = row.test_epsilon.map(|e| e.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", row.epoch, row.mean_loss, eps));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
