//! `oodlab` command-line runner.
//!
//! Every failure ends with exit code 1 (2 for usage errors) and one JSON
//! line on stderr: `{"error":{"kind":"config","message":"..."}}`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use oodlab::datasets::{load_csv, Dataset, Role};
use oodlab::eval::{read_runs_json, summarize_scores};
use oodlab::experiment::{
    build_report, compare, default_presets, export_embeddings, preset, run_experiment, write_report,
    ExperimentConfig, ExperimentData, RunFailure, REPORT_TITLE,
};
use oodlab::model::Checkpoint;
use oodlab::scoring::{read_scores_csv, score_dataset, write_scores_csv, ScorerRule};
use oodlab::Error;

#[derive(Parser)]
#[command(name = "oodlab", version, about = "Objective-level OOD detection experiments")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/test/near/far CSV files for one seed.
    GenData(GenDataArgs),
    /// Train, score and evaluate every run of one configuration.
    Train(TrainArgs),
    /// Score CSV datasets with a saved checkpoint.
    Score(ScoreArgs),
    /// Compute ID accuracy and near/far AUROC from a scores file.
    Eval(EvalArgs),
    /// Run one experiment per objective and write a comparison report.
    Compare(CompareArgs),
    /// Write network outputs for ID, near-OOD and far-OOD examples.
    ExportEmbeddings(ExportArgs),
    /// Rebuild a comparison report from persisted run metrics.
    Report(ReportArgs),
}

#[derive(Args)]
struct Source {
    /// Experiment config file (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Named preset, e.g. cifar10-analog/prototype.
    #[arg(long)]
    preset: Option<String>,
    /// Base seed; run r uses seed + r.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
}

impl Source {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let cfg = match (&self.config, &self.preset) {
            (Some(path), None) => ExperimentConfig::load(path)?,
            (None, Some(name)) => preset(name)?,
            _ => return Err(Error::Config("pass exactly one of --config or --preset".into())),
        };
        apply_overrides(cfg, self.seed, self.runs)
    }
}

fn apply_overrides(mut cfg: ExperimentConfig, seed: Option<u64>, runs: Option<usize>) -> Result<ExperimentConfig, Error> {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(r) = runs {
        cfg.runs = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DataFiles {
    /// ID test CSV.
    #[arg(long)]
    id: Option<PathBuf>,
    /// Near-OOD CSV.
    #[arg(long)]
    near: Option<PathBuf>,
    /// Far-OOD CSV.
    #[arg(long)]
    far: Option<PathBuf>,
}

impl DataFiles {
    fn load(&self, classes: usize) -> Result<Vec<Dataset>, Error> {
        let mut out = Vec::new();
        for (path, role) in [(&self.id, Role::IdTest), (&self.near, Role::NearOod), (&self.far, Role::FarOod)] {
            if let Some(p) = path {
                out.push(load_csv(p, role, Some(classes))?);
            }
        }
        if out.is_empty() {
            return Err(Error::Config("pass at least one of --id, --near, --far".into()));
        }
        Ok(out)
    }
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataFiles,
    /// msp, entropy, knn or auto.
    #[arg(long, default_value = "auto")]
    scorer: ScorerRule,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Scores file written by `score` or `train`.
    scores: PathBuf,
    /// Write the metrics JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Config files, one per objective.
    #[arg(long)]
    config: Vec<PathBuf>,
    /// Presets, one per objective. Without any config or preset the four
    /// cifar10-analog presets are compared.
    #[arg(long)]
    preset: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Regenerate the test and OOD sets from this config (or preset) and seed.
    #[command(flatten)]
    source: OptionalSource,
    #[command(flatten)]
    data: DataFiles,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OptionalSource {
    #[arg(long, conflicts_with_all = ["preset", "id", "near", "far"])]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with_all = ["id", "near", "far"])]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReportArgs {
    /// `runs.json`, or a directory containing it.
    runs: PathBuf,
    /// Directory for report.md and report.json; prints markdown when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            emit_error("usage", &e.render().to_string());
            return ExitCode::from(2);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            emit_error(e.kind(), &e.to_string());
            ExitCode::FAILURE
        }
    }
}

fn emit_error(kind: &str, message: &str) {
    let record = serde_json::json!({ "error": { "kind": kind, "message": message.trim_end() } });
    eprintln!("{record}");
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::GenData(a) => {
            let cfg = a.source.resolve()?;
            let data = ExperimentData::build(&cfg.dataset, cfg.seed)?;
            data.write_csv(&a.out)?;
            for (name, d) in data.named() {
                println!("{}\t{} examples", a.out.join(format!("{name}.csv")).display(), d.len());
            }
        }
        Command::Train(a) => {
            let cfg = a.source.resolve()?;
            let o = run_experiment(&cfg, Some(&a.out))?;
            for m in &o.runs {
                println!(
                    "run {} seed {}: id_accuracy {:.4} near_auroc {:.4} far_auroc {:.4}",
                    m.run, m.seed, m.id_accuracy, m.near_auroc, m.far_auroc
                );
            }
            if !o.failures.is_empty() {
                return Err(failed_runs(&o.failures, o.runs.len()));
            }
        }
        Command::Score(a) => {
            let model = Checkpoint::load(&a.checkpoint)?.into_model()?;
            let sets = a
                .data
                .load(model.classes())?
                .iter()
                .map(|d| score_dataset(&model, d, a.scorer))
                .collect::<Result<Vec<_>, _>>()?;
            write_scores_csv(&a.out, &sets.iter().collect::<Vec<_>>())?;
            println!("{}", a.out.display());
        }
        Command::Eval(a) => {
            let summary = summarize_scores(&read_scores_csv(&a.scores)?)?;
            let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::Serde(e.to_string()))?;
            match a.out {
                Some(p) => std::fs::write(&p, text + "\n").map_err(|e| io(&p, e))?,
                None => println!("{text}"),
            }
        }
        Command::Compare(a) => {
            let mut configs = Vec::new();
            for p in &a.config {
                configs.push(ExperimentConfig::load(p)?);
            }
            for name in &a.preset {
                configs.push(preset(name)?);
            }
            if configs.is_empty() {
                configs = default_presets();
            }
            let configs = configs
                .into_iter()
                .map(|c| apply_overrides(c, a.seed, a.runs))
                .collect::<Result<Vec<_>, _>>()?;
            let o = compare(&configs, Some(&a.out))?;
            print!("{}", o.report.to_markdown(REPORT_TITLE));
        }
        Command::ExportEmbeddings(a) => {
            let model = Checkpoint::load(&a.checkpoint)?.into_model()?;
            let datasets = match (&a.source.config, &a.source.preset) {
                (None, None) => a.data.load(model.classes())?,
                _ => {
                    let src = Source {
                        config: a.source.config.clone(),
                        preset: a.source.preset.clone(),
                        seed: a.source.seed,
                        runs: None,
                    };
                    let cfg = src.resolve()?;
                    let d = ExperimentData::build(&cfg.dataset, cfg.seed)?;
                    vec![d.test, d.near, d.far]
                }
            };
            let n = export_embeddings(&model, &datasets.iter().collect::<Vec<_>>(), &a.out)?;
            println!("{}\t{n} rows", a.out.display());
        }
        Command::Report(a) => {
            let (runs_path, dir) = if a.runs.is_dir() {
                (a.runs.join("runs.json"), a.runs.clone())
            } else {
                (a.runs.clone(), a.runs.parent().map(Path::to_path_buf).unwrap_or_default())
            };
            let runs = read_runs_json(&runs_path)?;
            let failures_path = dir.join("failures.json");
            let failures: Vec<RunFailure> = if failures_path.exists() {
                let text = std::fs::read_to_string(&failures_path).map_err(|e| io(&failures_path, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", failures_path.display())))?
            } else {
                Vec::new()
            };
            let report = build_report(&runs, &failures)?;
            match a.out {
                Some(out) => {
                    std::fs::create_dir_all(&out).map_err(|e| io(&out, e))?;
                    write_report(&out, &report)?;
                }
                None => print!("{}", report.to_markdown(REPORT_TITLE)),
            }
        }
    }
    Ok(())
}

fn failed_runs(failures: &[RunFailure], succeeded: usize) -> Error {
    let first = &failures[0];
    Error::InvalidState(format!(
        "{} of {} runs failed; first: run {} (seed {}): {}",
        failures.len(),
        failures.len() + succeeded,
        first.run,
        first.seed,
        first.message
    ))
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}
