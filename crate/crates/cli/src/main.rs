//! `metastop`: generate workspaces and profiles, fit stopping policies,
//! evaluate them and emit report tables.
//!
//! Every subcommand works inside one experiment directory (`--out`):
//!
//! ```text
//! config.json                   resolved configuration
//! envs/                         workspaces, grids and optimum labels
//! profiles/{train,test}.csv     raw performance profiles
//! predictor.model               CNN checkpoint
//! transition/<normalizer>.csv   transition model
//! policies/<normalizer>/w<w>/   one text file per policy
//! eval/<normalizer>_w<w>.json   evaluation results
//! report/                       CSV and Markdown tables
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use metastop_core::experiment::{self, report, EvalCase, EvalResult, ExperimentConfig, Format, ProfileData, Table};
use metastop_core::metareason::{
    fit_fixed_quality, fit_fixed_time, fit_transition, solve_dp, train_classifier_with, train_rnn_with, FeatureSet,
    StoppingPolicy, TransitionModel,
};
use metastop_core::nn::NeuralModel;
use metastop_core::predictor::{mean_similarity, read_dataset, train_predictor, write_dataset, Normalizer, NormalizerKind, PredictorDataset};
use metastop_core::profile::{oracle_actions, read_raw, write_raw, NormalizedProfile, UtilitySpec};
use metastop_core::seed::derive_seed;
use metastop_core::{PlannerKind, RobotShape};

#[derive(Parser)]
#[command(name = "metastop", version, about = "Learned stopping policies for anytime motion planners")]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Shared {
    /// Experiment configuration (JSON). Defaults to `<out>/config.json`,
    /// then to the built-in desk-scale configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment directory.
    #[arg(long, global = true, default_value = "metastop-out")]
    out: PathBuf,
    /// Utility weights, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    w: Option<Vec<f64>>,
    #[arg(long, global = true)]
    normalizer: Option<NormalizerKind>,
    #[arg(long, global = true)]
    planner: Option<PlannerKind>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample workspaces and label each with a long-run optimum.
    GenEnvs {
        #[arg(long)]
        n_envs: Option<usize>,
    },
    /// Record training and test performance profiles.
    GenProfiles,
    /// Train the CNN optimal-length predictor.
    TrainPredictor,
    /// Fit the categorical transition model on the training profiles.
    FitTransition {
        #[arg(long)]
        features: Option<FeatureSet>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Solve the stopping problem on the fitted transition model.
    SolveDp,
    TrainClassifier,
    TrainRnn,
    /// Fit the fixed-time and fixed-quality baselines.
    FitBaselines,
    /// Replay every fitted policy on the test profiles.
    Evaluate,
    /// Write comparison and transition-loss tables.
    Report,
    /// All of the above in order.
    Run,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .chain()
                .find_map(|c| c.downcast_ref::<metastop_core::Error>())
                .map_or("Other", |c| c.kind());
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error kind={kind} message={}", serde_json::to_string(&msg).unwrap_or(msg));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    let ctx = Ctx::new(&cli.shared)?;
    let pool = experiment::worker_pool()?;
    pool.install(|| match &cli.command {
        Command::GenEnvs { n_envs } => ctx.gen_envs(*n_envs),
        Command::GenProfiles => ctx.gen_profiles(),
        Command::TrainPredictor => ctx.train_predictor(),
        Command::FitTransition { features, alpha } => ctx.fit_transition(*features, *alpha),
        Command::SolveDp => ctx.solve_dp(),
        Command::TrainClassifier => ctx.train_classifier(),
        Command::TrainRnn => ctx.train_rnn(),
        Command::FitBaselines => ctx.fit_baselines(),
        Command::Evaluate => ctx.evaluate(),
        Command::Report => ctx.report(),
        Command::Run => ctx.run_all(),
    })
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

impl Ctx {
    fn new(s: &Shared) -> Result<Self> {
        let default_cfg = s.out.join("config.json");
        let mut cfg = match (&s.config, default_cfg.exists()) {
            (Some(p), _) => ExperimentConfig::from_json(&read(p)?)?,
            (None, true) => ExperimentConfig::from_json(&read(&default_cfg)?)?,
            (None, false) => ExperimentConfig::default(),
        };
        if let Some(seed) = s.seed {
            cfg.master_seed = seed;
        }
        if let Some(w) = &s.w {
            cfg.w = w.clone();
        }
        if let Some(n) = s.normalizer {
            cfg.normalizer = n;
        }
        if let Some(p) = s.planner {
            cfg.planner = p;
        }
        cfg.validate()?;
        Ok(Self { cfg, out: s.out.clone() })
    }

    fn envs(&self) -> Result<PredictorDataset> {
        let dir = self.out.join("envs");
        if !dir.join("manifest.csv").exists() {
            bail!(metastop_core::Error::MissingInput("envs/ (run gen-envs first)"));
        }
        Ok(read_dataset(&dir)?)
    }

    fn profiles(&self) -> Result<ProfileData> {
        let dir = self.out.join("profiles");
        if !dir.join("train.csv").exists() {
            bail!(metastop_core::Error::MissingInput("profiles/ (run gen-profiles first)"));
        }
        Ok(ProfileData {
            train: read_raw(&read(&dir.join("train.csv"))?)?,
            test: read_raw(&read(&dir.join("test.csv"))?)?,
        })
    }

    fn normalizer(&self) -> Result<Normalizer> {
        Ok(match self.cfg.normalizer {
            NormalizerKind::GroundTruth => Normalizer::ground_truth(),
            NormalizerKind::StraightLine => Normalizer::straight_line(),
            NormalizerKind::Cnn => {
                let path = self.out.join("predictor.model");
                if !path.exists() {
                    bail!(metastop_core::Error::MissingInput("predictor.model (run train-predictor first)"));
                }
                Normalizer::cnn(NeuralModel::from_checkpoint(&read(&path)?)?)
            }
        })
    }

    /// Training profiles under the configured normalizer, and test cases
    /// observed under it but scored against the ground truth.
    fn normalized(&self) -> Result<(Vec<NormalizedProfile>, Vec<EvalCase>)> {
        let envs = self.envs()?;
        let data = self.profiles()?;
        experiment::check_disjoint(&data)?;
        let q = self.cfg.q_levels;
        let observed = experiment::optimum_estimates(&envs, &self.normalizer()?)?;
        let truth = experiment::optimum_estimates(&envs, &Normalizer::ground_truth())?;
        let train = experiment::normalize_all(&data.train, &observed, q)?;
        let test_obs = experiment::normalize_all(&data.test, &observed, q)?;
        let test_gt = experiment::normalize_all(&data.test, &truth, q)?;
        let cases = test_obs.into_iter().zip(test_gt).map(|(observed, scored)| EvalCase { observed, scored }).collect();
        Ok((train, cases))
    }

    fn policy_dir(&self, w: f64) -> PathBuf {
        self.out.join("policies").join(self.cfg.normalizer.to_string()).join(format!("w{w}"))
    }

    fn save_policy(&self, p: &StoppingPolicy) -> Result<()> {
        write(&self.policy_dir(p.w).join(format!("{}.txt", p.name())), &p.to_text())
    }

    fn transition_path(&self) -> PathBuf {
        self.out.join("transition").join(format!("{}.csv", self.cfg.normalizer))
    }

    fn specs(&self) -> Result<Vec<(u64, UtilitySpec)>> {
        self.cfg.w.iter().enumerate().map(|(k, &w)| Ok((k as u64, UtilitySpec::new(w)?))).collect()
    }

    fn gen_envs(&self, n_envs: Option<usize>) -> Result<()> {
        let mut cfg = self.cfg.clone();
        if let Some(n) = n_envs {
            cfg.n_envs = n;
        }
        cfg.validate()?;
        let envs = experiment::build_envs(&cfg)?;
        write_dataset(&self.out.join("envs"), &envs, &RobotShape::l_shape())?;
        write(&self.out.join("config.json"), &cfg.to_json())?;
        println!(
            "{} workspaces ({} train, {} validation, {} test)",
            envs.samples.len(),
            envs.train.len(),
            envs.validation.len(),
            envs.test.len()
        );
        Ok(())
    }

    fn gen_profiles(&self) -> Result<()> {
        let data = experiment::record_profiles(&self.cfg, &self.envs()?)?;
        let dir = self.out.join("profiles");
        write(&dir.join("train.csv"), &write_raw(&data.train)?)?;
        write(&dir.join("test.csv"), &write_raw(&data.test)?)?;
        println!("{} training and {} test profiles", data.train.len(), data.test.len());
        Ok(())
    }

    fn train_predictor(&self) -> Result<()> {
        let envs = self.envs()?;
        let mut tc = self.cfg.predictor_train.clone();
        tc.seed = derive_seed(self.cfg.master_seed, "train-predictor", 0);
        let model = train_predictor(&envs, &tc)?;
        write(&self.out.join("predictor.model"), &model.to_checkpoint())?;
        let acc = mean_similarity(&model, &envs.split(&envs.test))?;
        let rows = vec![report::AccuracyRow { environment: "test".into(), accuracy: acc }];
        write(&self.out.join("report/accuracy.csv"), &report(&Table::Accuracy(rows), Format::Csv)?)?;
        println!("mean percent similarity on {} test grids: {acc:.2}%", envs.test.len());
        Ok(())
    }

    fn fit_transition(&self, features: Option<FeatureSet>, alpha: Option<f64>) -> Result<()> {
        let (train, _) = self.normalized()?;
        let fs = features.unwrap_or(self.cfg.model_features);
        let m = fit_transition(&train, fs, alpha.unwrap_or(self.cfg.alpha))?;
        write(&self.transition_path(), &m.to_csv())?;
        println!("{} conditioning rows over features {fs}", m.rows());
        Ok(())
    }

    fn solve_dp(&self) -> Result<()> {
        let path = self.transition_path();
        if !path.exists() {
            bail!(metastop_core::Error::MissingInput("transition model (run fit-transition first)"));
        }
        let m = TransitionModel::from_csv(&read(&path)?)?;
        for (_, spec) in self.specs()? {
            self.save_policy(&solve_dp(&m, spec)?)?;
        }
        Ok(())
    }

    fn train_classifier(&self) -> Result<()> {
        let (train, _) = self.normalized()?;
        for (k, spec) in self.specs()? {
            let labeled: Vec<_> = train.iter().map(|p| oracle_actions(p, spec)).collect();
            let mut tc = self.cfg.classifier_train.clone();
            tc.seed = derive_seed(self.cfg.master_seed, "train-classifier", k);
            let p = train_classifier_with(&labeled, self.cfg.classifier_features, &self.cfg.classifier_hidden, &tc)?;
            self.save_policy(&p)?;
        }
        Ok(())
    }

    fn train_rnn(&self) -> Result<()> {
        let (train, _) = self.normalized()?;
        for (k, spec) in self.specs()? {
            let labeled: Vec<_> = train.iter().map(|p| oracle_actions(p, spec)).collect();
            let mut tc = self.cfg.rnn_train.clone();
            tc.seed = derive_seed(self.cfg.master_seed, "train-rnn", k);
            self.save_policy(&train_rnn_with(&labeled, self.cfg.rnn_hidden, &tc)?)?;
        }
        Ok(())
    }

    fn fit_baselines(&self) -> Result<()> {
        let (train, _) = self.normalized()?;
        for (_, spec) in self.specs()? {
            let labeled: Vec<_> = train.iter().map(|p| oracle_actions(p, spec)).collect();
            self.save_policy(&fit_fixed_time(&labeled)?)?;
            self.save_policy(&fit_fixed_quality(&labeled)?)?;
        }
        Ok(())
    }

    fn evaluate(&self) -> Result<()> {
        let (_, cases) = self.normalized()?;
        for (_, spec) in self.specs()? {
            let dir = self.policy_dir(spec.w);
            let mut policies = Vec::new();
            for name in ["model_based", "classification", "rnn", "fixed_time", "fixed_quality"] {
                let path = dir.join(format!("{name}.txt"));
                if path.exists() {
                    policies.push(StoppingPolicy::from_text(&read(&path)?)?);
                }
            }
            if policies.is_empty() {
                bail!(metastop_core::Error::MissingInput("fitted policies"));
            }
            let r = experiment::evaluate(&policies, &cases, spec)?;
            for p in &r.policies {
                println!("w={} {:<15} {:.3} ± {:.3} {:?}", r.w, p.policy, p.mean, p.ci, p.mark);
            }
            write(&self.eval_path(spec.w), &serde_json::to_string_pretty(&r)?)?;
        }
        Ok(())
    }

    fn eval_path(&self, w: f64) -> PathBuf {
        self.out.join("eval").join(format!("{}_w{w}.json", self.cfg.normalizer))
    }

    fn report(&self) -> Result<()> {
        let mut results: Vec<EvalResult> = Vec::new();
        for (_, spec) in self.specs()? {
            let path = self.eval_path(spec.w);
            if !path.exists() {
                bail!(metastop_core::Error::MissingInput("evaluation results (run evaluate first)"));
            }
            results.push(serde_json::from_str(&read(&path)?)?);
        }
        let dir = self.out.join("report");
        let comparison = Table::Comparison(report::comparison_rows(&self.cfg.planner.to_string(), &results));
        write(&dir.join("comparison.csv"), &report(&comparison, Format::Csv)?)?;
        let md = report(&comparison, Format::Markdown)?;
        write(&dir.join("comparison.md"), &md)?;
        print!("{md}");

        let envs = self.envs()?;
        let data = self.profiles()?;
        let truth = experiment::optimum_estimates(&envs, &Normalizer::ground_truth())?;
        let train = experiment::normalize_all(&data.train, &truth, self.cfg.q_levels)?;
        let test = experiment::normalize_all(&data.test, &truth, self.cfg.q_levels)?;
        let rows =
            experiment::transition_table(&train, &test, &experiment::transition_feature_sets(), self.cfg.alpha)?;
        let transition = Table::Transition(rows);
        write(&dir.join("transition.csv"), &report(&transition, Format::Csv)?)?;
        let md = report(&transition, Format::Markdown)?;
        write(&dir.join("transition.md"), &md)?;
        print!("\n{md}");
        for (_, spec) in self.specs()? {
            write(&dir.join(format!("profiles_w{}.csv", spec.w)), &report::profile_plot_csv(&test, spec))?;
        }
        Ok(())
    }

    fn run_all(&self) -> Result<()> {
        self.gen_envs(None)?;
        self.gen_profiles()?;
        if self.cfg.normalizer == NormalizerKind::Cnn {
            self.train_predictor()?;
        }
        self.fit_transition(None, None)?;
        self.solve_dp()?;
        self.train_classifier()?;
        self.train_rnn()?;
        self.fit_baselines()?;
        self.evaluate()?;
        self.report()
    }
}
