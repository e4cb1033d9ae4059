//! Optimal-path-length prediction from occupancy grids, the baseline
//! normalizers, and the percent-similarity accuracy metric.

use std::fmt;
use std::path::Path as FsPath;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envgen::{rasterize, sample_workspace, straight_line_length, DistributionSpec, OccupancyGrid};
use crate::error::{Error, Result};
use crate::geom::{RobotShape, Workspace, WorkspaceDoc};
use crate::nn::{self, Activation, LayerSpec, Loss, NeuralModel, Sample, Tensor, TrainConfig};
use crate::planner::{plan_init, PlannerKind, PlannerParams};
use crate::seed;

/// Best path length after the first solution plus `iters` further iterations.
pub fn long_run_optimum(
    ws: &Workspace,
    shape: &RobotShape,
    params: &PlannerParams,
    kind: PlannerKind,
    seed: u64,
    iters: u64,
) -> Result<f64> {
    let mut st = plan_init(ws, shape, params, kind, seed)?;
    st.run_until_first_solution(crate::profile::FIRST_SOLUTION_CAP)?;
    st.step(iters);
    Ok(st.best_cost().expect("solution exists"))
}

#[derive(Debug, Clone)]
pub struct PredictorSample {
    pub env_id: u64,
    pub workspace: Workspace,
    pub grid: OccupancyGrid,
    pub optimal_length: f64,
}

#[derive(Debug, Clone)]
pub struct PredictorDataset {
    pub samples: Vec<PredictorSample>,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl PredictorDataset {
    pub fn split(&self, idx: &[usize]) -> Vec<&PredictorSample> {
        idx.iter().map(|&i| &self.samples[i]).collect()
    }
}

#[derive(Debug, Clone)]
pub struct DatasetOptions {
    pub shape: RobotShape,
    pub params: PlannerParams,
    pub kind: PlannerKind,
    pub resolution: usize,
    /// Iteration budget of the profiles the labels will normalize.
    pub profile_budget: u64,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            shape: RobotShape::l_shape(),
            params: PlannerParams::default(),
            kind: PlannerKind::RrtStar,
            resolution: crate::envgen::DEFAULT_GRID_RESOLUTION,
            profile_budget: crate::profile::DEFAULT_BUDGET,
        }
    }
}

/// Workspace `index` of a dataset: drawn from `specs[index % len]`.
pub fn dataset_workspace(specs: &[DistributionSpec], shape: &RobotShape, master: u64, index: u64) -> Result<Workspace> {
    let spec = &specs[index as usize % specs.len()];
    sample_workspace(spec, shape, seed::derive_seed(master, "env", index))
}

/// Seed of the long labelling run of workspace `index`.
pub fn label_seed(master: u64, index: u64) -> u64 {
    seed::derive_seed(master, "optimum", index)
}

/// Random 80/10/10 split of `0..n`, each part in ascending order.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed));
    let n_train = (n as f64 * 0.8).round() as usize;
    let n_val = (n as f64 * 0.1).round() as usize;
    let test = idx.split_off((n_train + n_val).min(n));
    let val = idx.split_off(n_train.min(idx.len()));
    let sorted = |mut v: Vec<usize>| {
        v.sort_unstable();
        v
    };
    (sorted(idx), sorted(val), sorted(test))
}

/// Samples `n_envs` workspaces, labels each with the best length of one
/// long planner run, and splits 80/10/10. Workspaces that cannot be
/// generated or solved are dropped and logged.
pub fn build_predictor_dataset(
    specs: &[DistributionSpec],
    n_envs: usize,
    seed: u64,
    long_budget_iters: u64,
    opts: &DatasetOptions,
) -> Result<PredictorDataset> {
    if specs.is_empty() || n_envs == 0 {
        return Err(Error::EmptyDataset);
    }
    if long_budget_iters < 10 * opts.profile_budget {
        return Err(Error::InvalidInput(format!(
            "long budget {long_budget_iters} below 10x the profile budget {}",
            opts.profile_budget
        )));
    }
    for s in specs {
        s.validate(&opts.shape)?;
    }
    let samples: Vec<Option<PredictorSample>> = (0..n_envs as u64)
        .into_par_iter()
        .map(|i| {
            let label = || -> Result<PredictorSample> {
                let ws = dataset_workspace(specs, &opts.shape, seed, i)?;
                let grid = rasterize(&ws, opts.resolution)?;
                let optimal_length =
                    long_run_optimum(&ws, &opts.shape, &opts.params, opts.kind, label_seed(seed, i), long_budget_iters)?;
                Ok(PredictorSample { env_id: i, workspace: ws, grid, optimal_length })
            };
            match label() {
                Ok(s) => Some(s),
                Err(e) => {
                    log::warn!("dropping workspace {i}: {e}");
                    None
                }
            }
        })
        .collect();
    let samples: Vec<_> = samples.into_iter().flatten().collect();
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (train, validation, test) = split_indices(samples.len(), seed::derive_seed(seed, "split", 0));
    Ok(PredictorDataset { samples, train, validation, test })
}

/// Network input: obstacle cells 1, free cells 0, start and goal cells −1.
pub fn grid_tensor(grid: &OccupancyGrid) -> Tensor {
    let n = grid.resolution;
    let mut data: Vec<f64> = grid.cells.iter().map(|&c| f64::from(c)).collect();
    data[grid.start_cell.0 * n + grid.start_cell.1] = -1.0;
    data[grid.goal_cell.0 * n + grid.goal_cell.1] = -1.0;
    Tensor::new(vec![1, n, n], data).expect("square grid")
}

/// conv(1→8, 5×5) → pool → conv(8→16, 5×5) → pool → dense(64, ReLU) → dense(1).
pub fn predictor_model(resolution: usize, seed: u64) -> Result<NeuralModel> {
    let side = ((resolution - 4) / 2 - 4) / 2;
    NeuralModel::new(
        vec![1, resolution, resolution],
        vec![
            LayerSpec::Conv2d { in_ch: 1, out_ch: 8, kernel: 5 },
            LayerSpec::MaxPool2,
            LayerSpec::Conv2d { in_ch: 8, out_ch: 16, kernel: 5 },
            LayerSpec::MaxPool2,
            LayerSpec::Flatten,
            LayerSpec::Dense { input: 16 * side * side, output: 64, activation: Activation::Relu },
            LayerSpec::Dense { input: 64, output: 1, activation: Activation::Identity },
        ],
        seed,
    )
}

fn regression_samples(samples: &[&PredictorSample]) -> Vec<Sample> {
    samples
        .iter()
        .map(|s| Sample {
            input: grid_tensor(&s.grid),
            target: Tensor::scalar(s.optimal_length / s.workspace.diagonal()),
        })
        .collect()
}

/// Default schedule for the CNN: Adam, learning rate 1e-3, batch 16, 30 epochs.
pub fn default_train_config(seed: u64) -> TrainConfig {
    TrainConfig::new(Loss::SquaredError, 1e-3, 16, 30, seed)
}

/// Trains the CNN on lengths scaled by the workspace diagonal and returns
/// the checkpoint with the lowest validation loss.
pub fn train_predictor(ds: &PredictorDataset, cfg: &TrainConfig) -> Result<NeuralModel> {
    if ds.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let res = ds.samples[0].grid.resolution;
    let train = regression_samples(&ds.split(&ds.train));
    let val = regression_samples(&ds.split(&ds.validation));
    let init = predictor_model(res, seed::derive_seed(cfg.seed, "cnn-init", 0))?;
    let mut cfg = cfg.clone();
    cfg.loss = Loss::SquaredError;
    let (model, hist) = nn::train_with_validation(&init, &train, &val, &cfg)?;
    log::info!(
        "predictor trained: best epoch {} of {}, final train loss {:.5}",
        hist.best_epoch,
        cfg.epochs,
        hist.train_loss.last().copied().unwrap_or(f64::NAN)
    );
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizerKind {
    GroundTruth,
    Cnn,
    StraightLine,
}

impl fmt::Display for NormalizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormalizerKind::GroundTruth => "ground_truth",
            NormalizerKind::Cnn => "cnn",
            NormalizerKind::StraightLine => "straight_line",
        })
    }
}

impl FromStr for NormalizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ground_truth" => Ok(NormalizerKind::GroundTruth),
            "cnn" => Ok(NormalizerKind::Cnn),
            "straight_line" => Ok(NormalizerKind::StraightLine),
            _ => Err(Error::InvalidInput(format!("unknown normalizer '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    kind: NormalizerKind,
    model: Option<NeuralModel>,
}

impl Normalizer {
    pub fn ground_truth() -> Self {
        Self { kind: NormalizerKind::GroundTruth, model: None }
    }

    pub fn straight_line() -> Self {
        Self { kind: NormalizerKind::StraightLine, model: None }
    }

    pub fn cnn(model: NeuralModel) -> Self {
        Self { kind: NormalizerKind::Cnn, model: Some(model) }
    }

    pub fn kind(&self) -> NormalizerKind {
        self.kind
    }
}

/// Optimal-length estimate in meters. CNN predictions are clamped below by
/// the straight-line distance.
pub fn predict_optimal_length(
    norm: &Normalizer,
    ws: &Workspace,
    grid: Option<&OccupancyGrid>,
    truth: Option<f64>,
) -> Result<f64> {
    match norm.kind {
        NormalizerKind::GroundTruth => truth.ok_or(Error::MissingInput("ground-truth optimal length")),
        NormalizerKind::StraightLine => Ok(straight_line_length(ws)),
        NormalizerKind::Cnn => {
            let grid = grid.ok_or(Error::MissingInput("occupancy grid"))?;
            let model = norm.model.as_ref().ok_or(Error::MissingInput("cnn model"))?;
            let y = model.forward(&grid_tensor(grid))?.data()[0] * ws.diagonal();
            Ok(y.max(straight_line_length(ws)))
        }
    }
}

/// `100·(1 − |pred − truth|/truth)`, floored at 0.
pub fn percent_similarity(pred: f64, truth: f64) -> f64 {
    (100.0 * (1.0 - (pred - truth).abs() / truth)).max(0.0)
}

/// Mean percent similarity of the model over the given samples.
pub fn mean_similarity(model: &NeuralModel, samples: &[&PredictorSample]) -> Result<f64> {
    let norm = Normalizer::cnn(model.clone());
    let mut total = 0.0;
    for s in samples {
        let p = predict_optimal_length(&norm, &s.workspace, Some(&s.grid), None)?;
        total += percent_similarity(p, s.optimal_length);
    }
    Ok(total / samples.len().max(1) as f64)
}

const MANIFEST_HEADER: &str = "env_id,split,optimal_length,straight_line_length,grid,grid_meta,workspace";

/// Writes grids (PGM plus JSON metadata), workspace documents and a CSV
/// manifest into `dir`.
pub fn write_dataset(dir: &FsPath, ds: &PredictorDataset, shape: &RobotShape) -> Result<()> {
    std::fs::create_dir_all(dir.join("grids"))?;
    std::fs::create_dir_all(dir.join("workspaces"))?;
    let mut split = vec!["train"; ds.samples.len()];
    for &i in &ds.validation {
        split[i] = "validation";
    }
    for &i in &ds.test {
        split[i] = "test";
    }
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    for (i, s) in ds.samples.iter().enumerate() {
        let grid = format!("grids/env_{}.pgm", s.env_id);
        let meta = format!("grids/env_{}.json", s.env_id);
        let wsf = format!("workspaces/env_{}.json", s.env_id);
        std::fs::write(dir.join(&grid), s.grid.to_pgm())?;
        std::fs::write(dir.join(&meta), s.grid.meta_json())?;
        std::fs::write(dir.join(&wsf), WorkspaceDoc::from_parts(&s.workspace, shape).to_json())?;
        manifest.push_str(&format!(
            "{},{},{},{},{grid},{meta},{wsf}\n",
            s.env_id,
            split[i],
            s.optimal_length,
            straight_line_length(&s.workspace)
        ));
    }
    std::fs::write(dir.join("manifest.csv"), manifest)?;
    Ok(())
}

pub fn read_dataset(dir: &FsPath) -> Result<PredictorDataset> {
    let text = std::fs::read_to_string(dir.join("manifest.csv"))?;
    let mut lines = text.lines();
    if lines.next() != Some(MANIFEST_HEADER) {
        return Err(Error::Parse("unexpected manifest header".into()));
    }
    let mut ds = PredictorDataset { samples: Vec::new(), train: Vec::new(), validation: Vec::new(), test: Vec::new() };
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(Error::Parse(format!("bad manifest row '{line}'")));
        }
        let bad = || Error::Parse(format!("bad manifest row '{line}'"));
        let env_id: u64 = f[0].parse().map_err(|_| bad())?;
        let optimal_length: f64 = f[2].parse().map_err(|_| bad())?;
        if !(optimal_length > 0.0) {
            return Err(Error::InvalidInput(format!("non-positive label in '{line}'")));
        }
        let grid = OccupancyGrid::from_pgm(
            &std::fs::read_to_string(dir.join(f[4]))?,
            &std::fs::read_to_string(dir.join(f[5]))?,
        )?;
        let (workspace, _) = WorkspaceDoc::from_json(&std::fs::read_to_string(dir.join(f[6]))?)?.into_parts()?;
        let i = ds.samples.len();
        match f[1] {
            "train" => ds.train.push(i),
            "validation" => ds.validation.push(i),
            "test" => ds.test.push(i),
            _ => return Err(bad()),
        }
        ds.samples.push(PredictorSample { env_id, workspace, grid, optimal_length });
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn similarity_examples() {
        assert_eq!(percent_similarity(5.0, 5.0), 100.0);
        assert!((percent_similarity(1.1 * 300.0, 300.0) - 90.0).abs() < 1e-9);
        assert_eq!(percent_similarity(0.0, 300.0), 0.0);
        assert_eq!(percent_similarity(900.0, 300.0), 0.0);
    }

    #[test]
    fn split_sizes() {
        let (a, b, c) = split_indices(1000, 1);
        assert_eq!((a.len(), b.len(), c.len()), (800, 100, 100));
        let mut all: Vec<_> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        assert_eq!(split_indices(1000, 1), (a, b, c));
    }

    fn ws_with(start: (f64, f64), goal: (f64, f64)) -> Workspace {
        Workspace::new(
            1000.0,
            1000.0,
            vec![],
            crate::Config::new(start.0, start.1, 0.0),
            crate::Config::new(goal.0, goal.1, 0.0),
        )
        .unwrap()
    }

    #[test]
    fn normalizer_examples() {
        let ws = ws_with((100.0, 100.0), (540.0, 100.0));
        assert_eq!(
            predict_optimal_length(&Normalizer::ground_truth(), &ws, None, Some(592.42)).unwrap(),
            592.42
        );
        assert!(matches!(
            predict_optimal_length(&Normalizer::ground_truth(), &ws, None, None),
            Err(Error::MissingInput(_))
        ));
        let ws2 = ws_with((100.0, 100.0), (100.0 + 622.25, 100.0));
        assert_eq!(predict_optimal_length(&Normalizer::straight_line(), &ws2, None, None).unwrap(), 622.25);

        // a zeroed network predicts 0 and is clamped to the straight line
        let mut m = predictor_model(16, 0).unwrap();
        for p in m.params_mut() {
            p.fill(0.0);
        }
        let grid = rasterize(&ws, 16).unwrap();
        let cnn = Normalizer::cnn(m);
        assert_eq!(predict_optimal_length(&cnn, &ws, Some(&grid), None).unwrap(), 440.0);
        assert!(matches!(predict_optimal_length(&cnn, &ws, None, None), Err(Error::MissingInput(_))));
    }

    #[test]
    fn long_budget_must_dominate_profile_budget() {
        let r = build_predictor_dataset(&[DistributionSpec::two_passage()], 1, 0, 100, &DatasetOptions::default());
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }
}
