//! Experiment configuration, named presets and multi-seed orchestration.
//!
//! A configuration is a TOML file with flat keys plus a `[dataset]` table:
//!
//! ```toml
//! objective = "prototype"        # ap | ce | prototype | triplet
//! lr = 0.1
//! epochs = 100
//! batch_size = 128
//! embedding_dim = 64             # embedding heads only
//! lambda = 0.01                  # prototype only
//! tau = 0.1                      # prototype only
//! scorer = "entropy"             # msp | entropy | knn | auto
//! seed = 0
//! runs = 5
//!
//! [dataset]
//! kind = "synthetic"
//! classes = 4
//! sigma = 0.3
//! ```
//!
//! Run `r` uses seed `seed + r` for everything it draws: data generation,
//! splitting, initialisation, shuffling and mining each take their own
//! [`Stream`] of that seed.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{gen_far_ood, gen_id, gen_near_ood, load_csv, split, Dataset, MixtureSpec, Role};
use crate::error::{Error, Result};
use crate::eval::{
    aggregate, auroc, id_accuracy, write_runs_csv, write_runs_json, ComparisonReport, RunMetrics,
};
use crate::model::{train, Checkpoint, Head, Network, NetworkConfig, OptimizerConfig, TrainedModel};
use crate::model::{Activation, DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY};
use crate::numerics::{RngState, Stream};
use crate::objectives::{HeadFamily, Mining, ObjectiveConfig, ObjectiveTag, DEFAULT_AP_DELTA, DEFAULT_MARGIN};
use crate::scoring::{score_dataset, write_scores_csv, ScoreSet, ScorerKind, ScorerRule};

pub const DEFAULT_RUNS: usize = 5;
pub const REPORT_TITLE: &str = "Objective comparison";

fn default_runs() -> usize {
    DEFAULT_RUNS
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}

fn default_weight_decay() -> f64 {
    DEFAULT_WEIGHT_DECAY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub objective: ObjectiveTag,
    /// Defaults to the head the objective trains.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<HeadFamily>,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mining: Option<Mining>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default)]
    pub scorer: ScorerRule,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub normalize_embeddings: bool,
    #[serde(default)]
    pub dataset: DatasetSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Csv(CsvSource),
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticSpec::default())
    }
}

/// Class means on a circle of `radius`; near-OOD at midpoints of adjacent
/// means, far-OOD on a distant shell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub sigma: f64,
    pub radius: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub near: usize,
    pub far: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 4,
            dim: 2,
            sigma: 0.3,
            radius: 1.0,
            train_per_class: 250,
            test_per_class: 100,
            near: 400,
            far: 400,
        }
    }
}

impl SyntheticSpec {
    pub fn mixture(&self, per_class: usize) -> Result<MixtureSpec> {
        MixtureSpec::on_circle(self.classes, self.dim, self.radius, self.sigma, per_class)
    }
}

fn default_split() -> [f64; 3] {
    [0.7, 0.1, 0.2]
}

/// ID examples are split into train/val/test; near and far files are used whole.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub id: PathBuf,
    pub near: PathBuf,
    pub far: PathBuf,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    /// Inferred from the largest ID label when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("invalid experiment config: {e}")))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Reads and validates a config; relative CSV paths resolve against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let DatasetSource::Csv(csv) = &mut cfg.dataset {
            let base = path.parent().unwrap_or(Path::new(""));
            for p in [&mut csv.id, &mut csv.near, &mut csv.far] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn head_family(&self) -> HeadFamily {
        self.head.unwrap_or(match self.objective {
            ObjectiveTag::CrossEntropy | ObjectiveTag::AveragePrecision => HeadFamily::Logits,
            ObjectiveTag::Prototype | ObjectiveTag::Triplet => HeadFamily::Embedding,
        })
    }

    /// Checks every field and the (objective, head, scorer) combination
    /// before anything runs.
    pub fn validate(&self) -> Result<()> {
        self.check_head()?;
        self.scorer_kind()?;
        self.objective_config()?.validate()?;
        self.optimizer_config().validate().map_err(to_config)?;
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be at least 1".into()));
        }
        match (self.head_family(), self.embedding_dim) {
            (HeadFamily::Embedding, None) => {
                return Err(Error::Config(format!(
                    "objective {} trains an embedding head; set embedding_dim",
                    self.objective
                )))
            }
            (HeadFamily::Embedding, Some(0)) => return Err(Error::Config("embedding_dim must be at least 1".into())),
            (HeadFamily::Logits, Some(_)) => {
                return Err(Error::Config(format!(
                    "embedding_dim is only used by embedding heads; remove it for objective {}",
                    self.objective
                )))
            }
            _ => {}
        }
        match &self.dataset {
            DatasetSource::Synthetic(s) => {
                s.mixture(s.train_per_class.max(1)).map_err(to_config)?;
                if s.train_per_class == 0 || s.test_per_class == 0 || s.near == 0 || s.far == 0 {
                    return Err(Error::Config("synthetic dataset sizes must all be at least 1".into()));
                }
            }
            DatasetSource::Csv(c) => {
                if c.split.iter().any(|f| !(*f > 0.0)) || (c.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!(
                        "dataset.split must be three positive fractions summing to 1, got {:?}",
                        c.split
                    )));
                }
            }
        }
        Ok(())
    }

    fn check_head(&self) -> Result<()> {
        let needed = match self.objective {
            ObjectiveTag::CrossEntropy | ObjectiveTag::AveragePrecision => HeadFamily::Logits,
            ObjectiveTag::Prototype | ObjectiveTag::Triplet => HeadFamily::Embedding,
        };
        if self.head_family() != needed {
            let name = |h: HeadFamily| match h {
                HeadFamily::Logits => "logits",
                HeadFamily::Embedding => "embedding",
            };
            return Err(Error::Config(format!(
                "objective {} trains a {} head, not {}; set head = \"{}\" or drop the head key",
                self.objective,
                name(needed),
                name(self.head_family()),
                name(needed)
            )));
        }
        Ok(())
    }

    pub fn scorer_kind(&self) -> Result<ScorerKind> {
        self.scorer.resolve(self.objective)
    }

    /// Objective hyperparameters, rejecting keys that belong to other objectives.
    pub fn objective_config(&self) -> Result<ObjectiveConfig> {
        let stray = |key: &str, set: bool| -> Result<()> {
            if set {
                Err(Error::Config(format!(
                    "{key} does not apply to objective {}; remove it",
                    self.objective
                )))
            } else {
                Ok(())
            }
        };
        let t = self.objective;
        stray("margin", self.margin.is_some() && t != ObjectiveTag::Triplet)?;
        stray("mining", self.mining.is_some() && t != ObjectiveTag::Triplet)?;
        stray("lambda", self.lambda.is_some() && t != ObjectiveTag::Prototype)?;
        stray("tau", self.tau.is_some() && t != ObjectiveTag::Prototype)?;
        stray("delta", self.delta.is_some() && t != ObjectiveTag::AveragePrecision)?;
        let required = |key: &str, v: Option<f64>| {
            v.ok_or_else(|| Error::Config(format!("objective {t} needs {key}")))
        };
        Ok(match t {
            ObjectiveTag::CrossEntropy => ObjectiveConfig::CrossEntropy,
            ObjectiveTag::AveragePrecision => ObjectiveConfig::AveragePrecision {
                delta: self.delta.unwrap_or(DEFAULT_AP_DELTA),
            },
            ObjectiveTag::Triplet => ObjectiveConfig::Triplet {
                margin: self.margin.unwrap_or(DEFAULT_MARGIN),
                mining: self.mining.unwrap_or(Mining::Random),
            },
            ObjectiveTag::Prototype => ObjectiveConfig::Prototype {
                lambda: required("lambda", self.lambda)?,
                tau: required("tau", self.tau)?,
            },
        })
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            batch_size: self.batch_size,
        }
    }

    pub fn network_config(&self, input_dim: usize, classes: usize) -> NetworkConfig {
        let head = match self.head_family() {
            HeadFamily::Logits => Head::Logits { classes },
            HeadFamily::Embedding => Head::Embedding {
                dim: self.embedding_dim.unwrap_or(0),
            },
        };
        NetworkConfig {
            input_dim,
            hidden: self.hidden.clone(),
            activation: Activation::Relu,
            head,
            normalize_embeddings: self.normalize_embeddings,
        }
    }

    pub fn run_seed(&self, run: usize) -> u64 {
        self.seed.wrapping_add(run as u64)
    }
}

fn to_config(e: Error) -> Error {
    match e {
        Error::InvalidInput(m) => Error::Config(m),
        other => other,
    }
}

/// The dataset analogs the presets are named after.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Analog {
    Cifar10,
    Cifar100,
    Imagenet200,
}

impl Analog {
    pub const ALL: [Analog; 3] = [Analog::Cifar10, Analog::Cifar100, Analog::Imagenet200];

    pub fn as_str(self) -> &'static str {
        match self {
            Analog::Cifar10 => "cifar10-analog",
            Analog::Cifar100 => "cifar100-analog",
            Analog::Imagenet200 => "imagenet200-analog",
        }
    }
}

/// Every preset name, `<analog>/<objective>`.
pub fn preset_names() -> Vec<String> {
    Analog::ALL
        .iter()
        .flat_map(|a| ObjectiveTag::ALL.iter().map(move |t| format!("{}/{}", a.as_str(), t.as_str())))
        .collect()
}

/// The four `cifar10-analog` presets, one per objective.
pub fn default_presets() -> Vec<ExperimentConfig> {
    ObjectiveTag::ALL
        .iter()
        .map(|&t| preset_config(Analog::Cifar10, t))
        .collect()
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let (analog, objective) = name
        .split_once('/')
        .ok_or_else(|| unknown_preset(name))?;
    let analog = Analog::ALL
        .into_iter()
        .find(|a| a.as_str() == analog)
        .ok_or_else(|| unknown_preset(name))?;
    let objective: ObjectiveTag = objective.parse().map_err(|_| unknown_preset(name))?;
    Ok(preset_config(analog, objective))
}

fn unknown_preset(name: &str) -> Error {
    Error::Config(format!(
        "unknown preset {name:?}; available: {}",
        preset_names().join(", ")
    ))
}

/// Selected learning rate, embedding size, prototype parameters, mining and
/// scorer per (dataset, objective), on the default synthetic benchmark.
/// Epochs and batch size follow the training schedule of each dataset.
pub fn preset_config(analog: Analog, objective: ObjectiveTag) -> ExperimentConfig {
    use Analog::*;
    use ObjectiveTag::*;
    let (epochs, batch_size) = match analog {
        Cifar10 | Cifar100 => (100, 128),
        Imagenet200 => (90, 256),
    };
    let mut cfg = ExperimentConfig {
        objective,
        head: None,
        lr: 0.0,
        epochs,
        batch_size,
        momentum: DEFAULT_MOMENTUM,
        weight_decay: DEFAULT_WEIGHT_DECAY,
        embedding_dim: None,
        margin: None,
        mining: None,
        lambda: None,
        tau: None,
        delta: None,
        scorer: ScorerRule::Entropy,
        seed: 0,
        runs: DEFAULT_RUNS,
        hidden: default_hidden(),
        normalize_embeddings: false,
        dataset: DatasetSource::default(),
    };
    match (analog, objective) {
        (Cifar10 | Cifar100, AveragePrecision) => cfg.lr = 0.08,
        (Imagenet200, AveragePrecision) => cfg.lr = 0.10,
        (Cifar10, CrossEntropy) => cfg.lr = 0.10,
        (Cifar100 | Imagenet200, CrossEntropy) => cfg.lr = 0.08,
        (Cifar10, Prototype) => {
            cfg.lr = 0.10;
            cfg.embedding_dim = Some(64);
            cfg.lambda = Some(0.01);
            cfg.tau = Some(0.1);
        }
        (Cifar100 | Imagenet200, Prototype) => {
            cfg.lr = 0.10;
            cfg.embedding_dim = Some(128);
            cfg.lambda = Some(0.001);
            cfg.tau = Some(0.1);
            cfg.scorer = ScorerRule::Msp;
        }
        (_, Triplet) => {
            let (lr, ed, mining) = match analog {
                Cifar10 => (0.005, 32, Mining::Random),
                Cifar100 => (0.0004, 256, Mining::SemiHard),
                Imagenet200 => (0.0009, 512, Mining::SemiHard),
            };
            cfg.lr = lr;
            cfg.embedding_dim = Some(ed);
            cfg.margin = Some(DEFAULT_MARGIN);
            cfg.mining = Some(mining);
            cfg.scorer = ScorerRule::Knn;
        }
    }
    if objective == AveragePrecision {
        cfg.delta = Some(DEFAULT_AP_DELTA);
    }
    cfg
}

/// Train, test and OOD sets for one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentData {
    pub train: Dataset,
    pub test: Dataset,
    pub near: Dataset,
    pub far: Dataset,
}

impl ExperimentData {
    pub fn build(source: &DatasetSource, seed: u64) -> Result<Self> {
        match source {
            DatasetSource::Synthetic(s) => {
                let train = gen_id(&s.mixture(s.train_per_class)?, &mut RngState::for_stream(seed, Stream::IdTrain))?;
                let test = gen_id(&s.mixture(s.test_per_class)?, &mut RngState::for_stream(seed, Stream::IdTest))?
                    .with_role(Role::IdTest)?;
                let spec = s.mixture(s.train_per_class)?;
                let near = gen_near_ood(&spec, s.near, &mut RngState::for_stream(seed, Stream::NearOod))?;
                let far = gen_far_ood(&spec, s.far, &mut RngState::for_stream(seed, Stream::FarOod))?;
                Ok(ExperimentData { train, test, near, far })
            }
            DatasetSource::Csv(c) => {
                let id = load_csv(&c.id, Role::IdTrain, c.classes)?;
                let (train, _val, test) = split(&id, c.split, &mut RngState::for_stream(seed, Stream::Split))?;
                let near = load_csv(&c.near, Role::NearOod, Some(id.classes()))?;
                let far = load_csv(&c.far, Role::FarOod, Some(id.classes()))?;
                for (name, d) in [("near", &near), ("far", &far)] {
                    if d.dim() != id.dim() {
                        return Err(Error::Config(format!(
                            "{name} file has {} features, ID file has {}",
                            d.dim(),
                            id.dim()
                        )));
                    }
                }
                Ok(ExperimentData { train, test, near, far })
            }
        }
    }

    /// Writes `train.csv`, `test.csv`, `near.csv` and `far.csv` into `dir`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, d) in self.named() {
            d.write_csv(&dir.join(format!("{name}.csv")))?;
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, &Dataset); 4] {
        [("train", &self.train), ("test", &self.test), ("near", &self.near), ("far", &self.far)]
    }
}

/// Everything produced by one run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub metrics: RunMetrics,
    pub model: TrainedModel,
    pub test_scores: ScoreSet,
    pub near_scores: ScoreSet,
    pub far_scores: ScoreSet,
}

/// Metrics from the three score sets of one model.
pub fn evaluate(test: &ScoreSet, near: &ScoreSet, far: &ScoreSet) -> Result<(f64, f64, f64)> {
    let labels: Vec<usize> = test.true_labels.iter().map(|&y| y as usize).collect();
    Ok((
        id_accuracy(&test.predictions, &labels)?,
        auroc(&test.scores, &near.scores)?,
        auroc(&test.scores, &far.scores)?,
    ))
}

/// Trains and scores run `run` of `config` in memory.
pub fn run_once(config: &ExperimentConfig, run: usize) -> Result<RunOutcome> {
    config.validate()?;
    let seed = config.run_seed(run);
    let data = ExperimentData::build(&config.dataset, seed)?;
    let objective = config.objective_config()?;
    let net_cfg = config.network_config(data.train.dim(), data.train.classes());
    let network = Network::init(net_cfg, &mut RngState::for_stream(seed, Stream::Init))?;
    let model = train(
        network,
        &data.train,
        &objective,
        &config.optimizer_config(),
        &mut RngState::for_stream(seed, Stream::Train),
    )?;
    let scorer = config.scorer;
    let test_scores = score_dataset(&model, &data.test, scorer)?;
    let near_scores = score_dataset(&model, &data.near, scorer)?;
    let far_scores = score_dataset(&model, &data.far, scorer)?;
    let (id_accuracy, near_auroc, far_auroc) = evaluate(&test_scores, &near_scores, &far_scores)?;
    Ok(RunOutcome {
        metrics: RunMetrics {
            run,
            seed,
            objective: config.objective,
            scorer: test_scores.scorer,
            id_accuracy,
            near_auroc,
            far_auroc,
        },
        model,
        test_scores,
        near_scores,
        far_scores,
    })
}

/// A run that did not finish.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunFailure {
    pub objective: ObjectiveTag,
    pub run: usize,
    pub seed: u64,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentOutcome {
    pub runs: Vec<RunMetrics>,
    pub failures: Vec<RunFailure>,
}

/// Runs every seed of `config`. A failing run is recorded and the rest proceed.
///
/// With `out`, writes under it:
///
/// ```text
/// config.toml  runs.json  runs.csv  failures.json
/// run-<r>/checkpoint.json  run-<r>/scores.csv  run-<r>/metrics.json  run-<r>/diagnostics.json
/// ```
pub fn run_experiment(config: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentOutcome> {
    config.validate()?;
    if let Some(dir) = out {
        create_dir(dir)?;
        config.save(&dir.join("config.toml"))?;
    }
    let mut outcome = ExperimentOutcome::default();
    for run in 0..config.runs {
        let seed = config.run_seed(run);
        let result = run_once(config, run).and_then(|o| {
            if let Some(dir) = out {
                write_run_artifacts(&dir.join(format!("run-{run}")), &o)?;
            }
            Ok(o.metrics)
        });
        match result {
            Ok(m) => {
                log::info!(
                    "{} run {run} (seed {seed}): acc {:.4} near {:.4} far {:.4}",
                    config.objective,
                    m.id_accuracy,
                    m.near_auroc,
                    m.far_auroc
                );
                outcome.runs.push(m);
            }
            Err(e) => {
                log::error!("{} run {run} (seed {seed}) failed: {e}", config.objective);
                outcome.failures.push(RunFailure {
                    objective: config.objective,
                    run,
                    seed,
                    kind: e.kind().into(),
                    message: e.to_string(),
                });
            }
        }
    }
    if let Some(dir) = out {
        write_runs_json(&dir.join("runs.json"), &outcome.runs)?;
        write_runs_csv(&dir.join("runs.csv"), &outcome.runs)?;
        write_json(&dir.join("failures.json"), &outcome.failures)?;
    }
    Ok(outcome)
}

fn write_run_artifacts(dir: &Path, o: &RunOutcome) -> Result<()> {
    create_dir(dir)?;
    Checkpoint::from_model(&o.model).save(&dir.join("checkpoint.json"))?;
    write_scores_csv(&dir.join("scores.csv"), &[&o.test_scores, &o.near_scores, &o.far_scores])?;
    write_json(&dir.join("metrics.json"), &o.metrics)?;
    write_json(&dir.join("diagnostics.json"), &o.model.diagnostics)
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareOutcome {
    pub report: ComparisonReport,
    pub runs: Vec<RunMetrics>,
    pub failures: Vec<RunFailure>,
}

/// Runs one experiment per objective and compares them.
///
/// With `out`, each experiment writes into `<out>/<objective>/` and the
/// combined `runs.json`, `runs.csv`, `failures.json`, `report.md` and
/// `report.json` land in `out`.
pub fn compare(configs: &[ExperimentConfig], out: Option<&Path>) -> Result<CompareOutcome> {
    if configs.len() < 2 {
        return Err(Error::Config("compare needs at least two objectives".into()));
    }
    let mut seen = BTreeSet::new();
    for c in configs {
        if !seen.insert(c.objective) {
            return Err(Error::Config(format!(
                "objective {} appears more than once; compare takes one config per objective",
                c.objective
            )));
        }
        c.validate()?;
    }
    if let Some(dir) = out {
        create_dir(dir)?;
    }
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for c in configs {
        let sub = out.map(|d| d.join(c.objective.as_str()));
        let o = run_experiment(c, sub.as_deref())?;
        runs.extend(o.runs);
        failures.extend(o.failures);
    }
    let report = build_report(&runs, &failures)?;
    if let Some(dir) = out {
        write_runs_json(&dir.join("runs.json"), &runs)?;
        write_runs_csv(&dir.join("runs.csv"), &runs)?;
        write_json(&dir.join("failures.json"), &failures)?;
        write_report(dir, &report)?;
    }
    Ok(CompareOutcome { report, runs, failures })
}

/// Aggregates persisted runs. Objectives left with fewer than two successful
/// runs are dropped from the tables; they and every failure become notes.
pub fn build_report(runs: &[RunMetrics], failures: &[RunFailure]) -> Result<ComparisonReport> {
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for tag in ObjectiveTag::ALL {
        let mine: Vec<RunMetrics> = runs.iter().filter(|r| r.objective == tag).cloned().collect();
        match mine.len() {
            0 => {}
            1 => dropped.push(tag),
            _ => kept.extend(mine),
        }
    }
    let mut report = aggregate(&kept)?;
    for tag in dropped {
        report.notes.push(format!(
            "{} completed only one run and is left out of the tables.",
            tag.display_name()
        ));
    }
    for f in failures {
        report.notes.push(format!(
            "{} run {} (seed {}) failed [{}]: {}",
            f.objective.display_name(),
            f.run,
            f.seed,
            f.kind,
            f.message
        ));
    }
    Ok(report)
}

/// Writes `report.md` and `report.json` into `dir`.
pub fn write_report(dir: &Path, report: &ComparisonReport) -> Result<()> {
    let md = dir.join("report.md");
    std::fs::write(&md, report.to_markdown(REPORT_TITLE)).map_err(|e| Error::io(&md, e))?;
    let json = dir.join("report.json");
    std::fs::write(&json, report.to_json()? + "\n").map_err(|e| Error::io(&json, e))
}

/// One row per example: output values, `id`/`near`/`far`, label.
pub fn export_embeddings(model: &TrainedModel, datasets: &[&Dataset], path: &Path) -> Result<usize> {
    let width = model.network.output_width();
    let prefix = match model.network.config().head {
        Head::Logits { .. } => "logit",
        Head::Embedding { .. } => "e",
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header: Vec<String> = (0..width).map(|i| format!("{prefix}{i}")).collect();
    header.push("role".into());
    header.push("label".into());
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    let mut rows = 0;
    for d in datasets {
        let role = match d.role() {
            r if r.is_id() => "id",
            Role::NearOod => "near",
            _ => "far",
        };
        let out = model.network.forward(&d.features())?;
        for (row, ex) in out.iter_rows().zip(d.examples()) {
            let mut rec: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            rec.push(role.into());
            rec.push(ex.y.to_string());
            w.write_record(&rec).map_err(|e| csv_error(path, e))?;
            rows += 1;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(rows)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Serde(format!("{}: {other:?}", path.display())),
    }
}
