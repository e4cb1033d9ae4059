//! Experiment orchestration: workspace sets with long-run labels, profile
//! datasets, policy training, evaluation and report tables.
//!
//! Every random stream is seeded by [`crate::seed::derive_seed`] from the
//! master seed, a purpose tag and an index, so a rerun with the same
//! configuration reproduces every number.

pub mod eval;
pub mod report;

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use eval::{evaluate, mean_ci, run_episode, welch_p_value, EpisodeSetup, EvalCase, EvalResult, Mark, PolicyResult};
pub use report::{report, ComparisonRow, Format, NormalizerRow, Table, TransitionRow};

use crate::envgen::DistributionSpec;
use crate::error::{Error, Result};
use crate::geom::RobotShape;
use crate::metareason::{
    fit_fixed_quality, fit_fixed_time, fit_transition, solve_dp, train_classifier_with, train_rnn_with,
    transition_nll, FeatureSet, StoppingPolicy, CLASSIFIER_HIDDEN, RNN_HIDDEN,
};
use crate::nn::{Loss, Optimizer, TrainConfig};
use crate::planner::{PlannerKind, PlannerParams};
use crate::predictor::{
    build_predictor_dataset, predict_optimal_length, train_predictor, DatasetOptions, Normalizer, NormalizerKind,
    PredictorDataset,
};
use crate::profile::{normalize_lenient, oracle_actions, record_profile, NormalizedProfile, RawProfile, UtilitySpec};
use crate::seed::derive_seed;

/// Environment variable bounding the worker count.
pub const THREADS_ENV: &str = "METASTOP_THREADS";

pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Worker pool sized by `METASTOP_THREADS` (default: available cores).
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyName {
    ModelBased,
    Classification,
    Rnn,
    FixedTime,
    FixedQuality,
}

impl PolicyName {
    pub const ALL: [PolicyName; 5] = [
        PolicyName::ModelBased,
        PolicyName::Classification,
        PolicyName::Rnn,
        PolicyName::FixedTime,
        PolicyName::FixedQuality,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub distributions: Vec<DistributionSpec>,
    pub planner: PlannerKind,
    pub planner_params: PlannerParams,
    pub q_levels: usize,
    pub t_steps: usize,
    /// Iterations after the first solution covered by one profile.
    pub budget_iters: u64,
    /// Iterations of the run that labels each workspace's optimum.
    pub long_budget_iters: u64,
    pub w: Vec<f64>,
    pub normalizer: NormalizerKind,
    /// Workspaces sampled; split 80/10/10, with train and validation
    /// workspaces feeding training profiles and test workspaces feeding
    /// test profiles.
    pub n_envs: usize,
    pub train_profiles: usize,
    pub test_profiles: usize,
    pub test_runs_per_env: usize,
    pub master_seed: u64,
    pub grid_resolution: usize,
    pub alpha: f64,
    pub policies: Vec<PolicyName>,
    pub model_features: FeatureSet,
    pub classifier_features: FeatureSet,
    pub classifier_hidden: Vec<usize>,
    pub classifier_train: TrainConfig,
    pub rnn_hidden: usize,
    pub rnn_train: TrainConfig,
    pub predictor_train: TrainConfig,
}

impl Default for ExperimentConfig {
    /// Desk-scale comparison: two_passage and random_blocks workspaces,
    /// RRT*, 900 training and 100 test profiles (20 workspaces × 5 runs).
    fn default() -> Self {
        let mut rnn_train = TrainConfig::new(Loss::SoftmaxCrossEntropy, 1e-3, 16, 60, 0);
        rnn_train.clip_norm = Some(5.0);
        Self {
            distributions: vec![DistributionSpec::two_passage(), DistributionSpec::random_blocks()],
            planner: PlannerKind::RrtStar,
            planner_params: PlannerParams::default(),
            q_levels: crate::profile::DEFAULT_Q,
            t_steps: crate::profile::DEFAULT_T,
            budget_iters: crate::profile::DEFAULT_BUDGET,
            long_budget_iters: 10 * crate::profile::DEFAULT_BUDGET,
            w: vec![0.8, 0.4],
            normalizer: NormalizerKind::GroundTruth,
            n_envs: 200,
            train_profiles: 900,
            test_profiles: 100,
            test_runs_per_env: 5,
            master_seed: 2019,
            grid_resolution: crate::envgen::DEFAULT_GRID_RESOLUTION,
            alpha: 0.1,
            policies: PolicyName::ALL.to_vec(),
            model_features: FeatureSet::model_based(),
            classifier_features: FeatureSet::all(),
            classifier_hidden: CLASSIFIER_HIDDEN.to_vec(),
            classifier_train: TrainConfig::new(Loss::SoftmaxCrossEntropy, 1e-3, 128, 8, 0),
            rnn_hidden: RNN_HIDDEN,
            rnn_train,
            predictor_train: crate::predictor::default_train_config(0),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.distributions.is_empty() {
            return bad("no distributions".into());
        }
        if self.n_envs == 0 || self.train_profiles == 0 || self.test_profiles == 0 || self.test_runs_per_env == 0 {
            return bad("dataset sizes must be positive".into());
        }
        if self.test_profiles % self.test_runs_per_env != 0 {
            return bad(format!(
                "test_profiles {} is not a multiple of test_runs_per_env {}",
                self.test_profiles, self.test_runs_per_env
            ));
        }
        if self.w.is_empty() || self.w.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return bad(format!("w values {:?} must lie in [0, 1]", self.w));
        }
        if self.t_steps == 0 || self.budget_iters == 0 || self.budget_iters % self.t_steps as u64 != 0 {
            return bad(format!("budget {} must be a positive multiple of T={}", self.budget_iters, self.t_steps));
        }
        if self.long_budget_iters < 10 * self.budget_iters {
            return bad("long_budget_iters must be at least 10x budget_iters".into());
        }
        if self.q_levels == 0 {
            return bad("Q must be positive".into());
        }
        self.planner_params.validate()?;
        self.classifier_train.validate()?;
        self.rnn_train.validate()?;
        self.predictor_train.validate()?;
        let shape = RobotShape::l_shape();
        for d in &self.distributions {
            d.validate(&shape)?;
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable config")
    }

    pub fn dataset_options(&self) -> DatasetOptions {
        DatasetOptions {
            shape: RobotShape::l_shape(),
            params: self.planner_params,
            kind: self.planner,
            resolution: self.grid_resolution,
            profile_budget: self.budget_iters,
        }
    }

    /// Training configuration with its seed derived from the master seed.
    fn seeded(&self, base: &TrainConfig, tag: &str, index: u64) -> TrainConfig {
        let mut c = base.clone();
        c.seed = derive_seed(self.master_seed, tag, index);
        c
    }
}

/// Samples and labels the workspace set of an experiment.
pub fn build_envs(cfg: &ExperimentConfig) -> Result<PredictorDataset> {
    build_predictor_dataset(
        &cfg.distributions,
        cfg.n_envs,
        cfg.master_seed,
        cfg.long_budget_iters,
        &cfg.dataset_options(),
    )
}

/// Indices of workspaces that feed training profiles (train and validation
/// splits), in ascending id order.
pub fn training_pool(envs: &PredictorDataset) -> Vec<usize> {
    let mut v: Vec<usize> = envs.train.iter().chain(&envs.validation).copied().collect();
    v.sort_by_key(|&i| envs.samples[i].env_id);
    v
}

pub fn test_pool(envs: &PredictorDataset) -> Vec<usize> {
    let mut v = envs.test.clone();
    v.sort_by_key(|&i| envs.samples[i].env_id);
    v
}

pub fn profile_seed(master: u64, env_id: u64, run: u64) -> u64 {
    derive_seed(master, "profile", (env_id << 20) | run)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileData {
    pub train: Vec<RawProfile>,
    pub test: Vec<RawProfile>,
}

fn record_jobs(cfg: &ExperimentConfig, envs: &PredictorDataset, jobs: &[(usize, u64)]) -> Vec<RawProfile> {
    let shape = RobotShape::l_shape();
    let out: Vec<Option<RawProfile>> = jobs
        .par_iter()
        .map(|&(idx, run)| {
            let s = &envs.samples[idx];
            let seed = profile_seed(cfg.master_seed, s.env_id, run);
            match record_profile(&s.workspace, &shape, &cfg.planner_params, cfg.planner, seed, cfg.budget_iters, cfg.t_steps) {
                Ok(mut p) => {
                    p.env_id = s.env_id;
                    p.run_id = run;
                    Some(p)
                }
                Err(e) => {
                    log::warn!("excluding profile (env {}, run {run}): {e}", s.env_id);
                    None
                }
            }
        })
        .collect();
    out.into_iter().flatten().collect()
}

/// Records training profiles round-robin over the training pool and test
/// profiles as `test_runs_per_env` runs on each of the first test
/// workspaces.
pub fn record_profiles(cfg: &ExperimentConfig, envs: &PredictorDataset) -> Result<ProfileData> {
    let train_pool = training_pool(envs);
    let test_pool = test_pool(envs);
    if train_pool.is_empty() {
        return Err(Error::InsufficientData("no training workspaces".into()));
    }
    let n_test_envs = cfg.test_profiles / cfg.test_runs_per_env;
    if test_pool.len() < n_test_envs {
        return Err(Error::InsufficientData(format!(
            "{n_test_envs} test workspaces needed, {} available",
            test_pool.len()
        )));
    }
    let train_jobs: Vec<(usize, u64)> = (0..cfg.train_profiles)
        .map(|k| (train_pool[k % train_pool.len()], (k / train_pool.len()) as u64))
        .collect();
    let test_jobs: Vec<(usize, u64)> = (0..cfg.test_profiles)
        .map(|k| (test_pool[k / cfg.test_runs_per_env], (k % cfg.test_runs_per_env) as u64))
        .collect();
    let data = ProfileData { train: record_jobs(cfg, envs, &train_jobs), test: record_jobs(cfg, envs, &test_jobs) };
    check_disjoint(&data)?;
    Ok(data)
}

/// Fails if any workspace contributes to both training and test profiles.
pub fn check_disjoint(data: &ProfileData) -> Result<()> {
    let train: BTreeSet<u64> = data.train.iter().map(|p| p.env_id).collect();
    if let Some(p) = data.test.iter().find(|p| train.contains(&p.env_id)) {
        return Err(Error::InvalidInput(format!("workspace {} used for training and testing", p.env_id)));
    }
    Ok(())
}

/// Optimal-length estimate of every workspace under `norm`.
pub fn optimum_estimates(envs: &PredictorDataset, norm: &Normalizer) -> Result<BTreeMap<u64, f64>> {
    envs.samples
        .iter()
        .map(|s| {
            let v = predict_optimal_length(norm, &s.workspace, Some(&s.grid), Some(s.optimal_length))?;
            Ok((s.env_id, v))
        })
        .collect()
}

pub fn normalize_all(raws: &[RawProfile], optimum: &BTreeMap<u64, f64>, q_levels: usize) -> Result<Vec<NormalizedProfile>> {
    raws.iter()
        .map(|r| {
            let opt = optimum.get(&r.env_id).ok_or(Error::MissingInput("optimal-length estimate"))?;
            normalize_lenient(r, *opt, q_levels)
        })
        .collect()
}

/// Builds the normalizer named by `kind`, training the CNN on the
/// train/validation splits of `envs` when needed.
pub fn make_normalizer(cfg: &ExperimentConfig, kind: NormalizerKind, envs: &PredictorDataset) -> Result<Normalizer> {
    Ok(match kind {
        NormalizerKind::GroundTruth => Normalizer::ground_truth(),
        NormalizerKind::StraightLine => Normalizer::straight_line(),
        NormalizerKind::Cnn => {
            let tc = cfg.seeded(&cfg.predictor_train, "train-predictor", 0);
            Normalizer::cnn(train_predictor(envs, &tc)?)
        }
    })
}

/// Fits the configured policies for one utility weight.
pub fn train_policies(
    cfg: &ExperimentConfig,
    train: &[NormalizedProfile],
    spec: UtilitySpec,
    w_index: u64,
) -> Result<Vec<StoppingPolicy>> {
    let labeled: Vec<_> = train.iter().map(|p| oracle_actions(p, spec)).collect();
    let mut out = Vec::new();
    for name in &cfg.policies {
        let p = match name {
            PolicyName::ModelBased => {
                let m = fit_transition(train, cfg.model_features, cfg.alpha)?;
                solve_dp(&m, spec)?
            }
            PolicyName::Classification => {
                let tc = cfg.seeded(&cfg.classifier_train, "train-classifier", w_index);
                train_classifier_with(&labeled, cfg.classifier_features, &cfg.classifier_hidden, &tc)?
            }
            PolicyName::Rnn => {
                let tc = cfg.seeded(&cfg.rnn_train, "train-rnn", w_index);
                train_rnn_with(&labeled, cfg.rnn_hidden, &tc)?
            }
            PolicyName::FixedTime => fit_fixed_time(&labeled)?,
            PolicyName::FixedQuality => fit_fixed_quality(&labeled)?,
        };
        log::info!("trained {} for w={}", p.name(), spec.w);
        out.push(p);
    }
    Ok(out)
}

/// Feature sets of the transition-model loss table, in column order.
pub fn transition_feature_sets() -> Vec<FeatureSet> {
    ["{}", "t", "t,q", "t,q,q_prev", "t,q,slope", "t,q,slope,flatness", "t,slope,flatness"]
        .iter()
        .map(|s| s.parse().expect("valid feature set"))
        .collect()
}

/// Held-out mean NLL of the transition model for each feature set.
pub fn transition_table(
    train: &[NormalizedProfile],
    test: &[NormalizedProfile],
    sets: &[FeatureSet],
    alpha: f64,
) -> Result<Vec<TransitionRow>> {
    sets.iter()
        .map(|&fs| {
            let m = fit_transition(train, fs, alpha)?;
            Ok(TransitionRow { features: fs.to_string(), mean_nll: transition_nll(&m, test).1 })
        })
        .collect()
}

/// Model-based policy performance under one normalizer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizerOutcome {
    pub row: NormalizerRow,
    /// Realized utilities in `keys` order.
    pub utilities: Vec<f64>,
    pub keys: Vec<(u64, u64)>,
}

/// Fits the model-based policy on training profiles normalized by each
/// normalizer and evaluates it on the test profiles, which the policy
/// observes through the same normalizer and which are scored against the
/// ground truth.
pub fn compare_normalizers(
    cfg: &ExperimentConfig,
    envs: &PredictorDataset,
    data: &ProfileData,
    normalizers: &[Normalizer],
    environment: &str,
    spec: UtilitySpec,
) -> Result<Vec<NormalizerOutcome>> {
    let truth = optimum_estimates(envs, &Normalizer::ground_truth())?;
    let test_gt = normalize_all(&data.test, &truth, cfg.q_levels)?;
    let test_envs: BTreeSet<u64> = data.test.iter().map(|p| p.env_id).collect();
    normalizers
        .iter()
        .map(|norm| {
            let est = optimum_estimates(envs, norm)?;
            let train = normalize_all(&data.train, &est, cfg.q_levels)?;
            let observed = normalize_all(&data.test, &est, cfg.q_levels)?;
            let policy = solve_dp(&fit_transition(&train, cfg.model_features, cfg.alpha)?, spec)?;
            let cases: Vec<EvalCase> = observed
                .into_iter()
                .zip(&test_gt)
                .map(|(o, s)| EvalCase { observed: o, scored: s.clone() })
                .collect();
            let r = evaluate(std::slice::from_ref(&policy), &cases, spec)?;
            let p = &r.policies[1];
            let avg_length = test_envs.iter().map(|e| est[e]).sum::<f64>() / test_envs.len() as f64;
            Ok(NormalizerOutcome {
                row: NormalizerRow {
                    environment: environment.to_string(),
                    normalizer: norm.kind().to_string(),
                    avg_length,
                    mean: p.mean,
                    ci: p.ci,
                },
                utilities: p.utilities.clone(),
                keys: r.keys.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub results: Vec<EvalResult>,
    pub comparison: Vec<ComparisonRow>,
    pub transition: Vec<TransitionRow>,
    /// Test profiles normalized with the ground truth.
    pub test_profiles: Vec<NormalizedProfile>,
}

impl ExperimentOutput {
    /// The report CSVs keyed by file name.
    pub fn csv_files(&self) -> Result<Vec<(String, String)>> {
        let mut files = vec![
            ("comparison.csv".to_string(), report(&Table::Comparison(self.comparison.clone()), Format::Csv)?),
            ("transition.csv".to_string(), report(&Table::Transition(self.transition.clone()), Format::Csv)?),
        ];
        for r in &self.results {
            files.push((
                format!("profiles_w{}.csv", r.w),
                report::profile_plot_csv(&self.test_profiles, UtilitySpec { w: r.w }),
            ));
        }
        Ok(files)
    }
}

/// Runs the whole pipeline: workspaces, profiles, normalizer, transition
/// table, and for every `w` the policy fits and their evaluation.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let envs = build_envs(cfg)?;
    let profiles = record_profiles(cfg, &envs)?;
    run_on_profiles(cfg, &envs, &profiles)
}

/// The pipeline after workspace labelling and profile recording.
pub fn run_on_profiles(cfg: &ExperimentConfig, envs: &PredictorDataset, profiles: &ProfileData) -> Result<ExperimentOutput> {
    let truth = optimum_estimates(envs, &Normalizer::ground_truth())?;
    let norm = make_normalizer(cfg, cfg.normalizer, envs)?;
    let observed_opt = optimum_estimates(envs, &norm)?;
    let train_gt = normalize_all(&profiles.train, &truth, cfg.q_levels)?;
    let test_gt = normalize_all(&profiles.test, &truth, cfg.q_levels)?;
    let train_obs = normalize_all(&profiles.train, &observed_opt, cfg.q_levels)?;
    let test_obs = normalize_all(&profiles.test, &observed_opt, cfg.q_levels)?;
    let cases: Vec<EvalCase> = test_obs
        .into_iter()
        .zip(&test_gt)
        .map(|(o, s)| EvalCase { observed: o, scored: s.clone() })
        .collect();
    let transition = transition_table(&train_gt, &test_gt, &transition_feature_sets(), cfg.alpha)?;
    let mut results = Vec::new();
    for (k, &w) in cfg.w.iter().enumerate() {
        let spec = UtilitySpec::new(w)?;
        let policies = train_policies(cfg, &train_obs, spec, k as u64)?;
        results.push(evaluate(&policies, &cases, spec)?);
    }
    let comparison = report::comparison_rows(&cfg.planner.to_string(), &results);
    Ok(ExperimentOutput { results, comparison, transition, test_profiles: test_gt })
}

/// Optimizer shorthand for configuration files and tests.
pub fn adam() -> Optimizer {
    Optimizer::adam()
}
