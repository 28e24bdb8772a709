//! `statprint` command-line driver.
//!
//! Each stage subcommand derives its seeds from `--seed` exactly as `run`
//! does, so chaining `gen-data`, `train`, `attack`, `fingerprint` and
//! `score` reproduces the artifacts of a single `run` with the same config.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;
use statprint::attacks::{build_zoo, load_zoo, save_zoo, train_victim, Role};
use statprint::experiment::{self, auc_table, read_results, ExperimentConfig};
use statprint::gnn::{load_model, save_model};
use statprint::graph::{generate_dataset, load_dataset, save_dataset};
use statprint::sampler::{sample_fingerprint, Fingerprint};
use statprint::verifier::{classify, score, write_score_rows, ScoreForm, ScoreRow, Threshold};
use statprint::EmbeddingModel;

#[derive(Parser)]
#[command(
    name = "statprint",
    version,
    about = "Stationary-point fingerprinting of embedding GNNs"
)]
struct Cli {
    /// Worker threads for training and scoring; defaults to one per core.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML (or .json) experiment config; defaults apply without one.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Master seed; overrides the config's.
    #[arg(long)]
    seed: u64,

    /// Fingerprint size ℓ.
    #[arg(long)]
    points: Option<usize>,

    /// Sampler feature-shift penalty λ.
    #[arg(long)]
    lambda: Option<f64>,

    /// Probe step δ for continuous features.
    #[arg(long)]
    delta: Option<f64>,

    /// Score form driving verdicts: percentile or ratio.
    #[arg(long)]
    form: Option<ScoreForm>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Failure> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).stage("load config")?,
            None => ExperimentConfig::default(),
        };
        cfg.seed = self.seed;
        if let Some(p) = self.points {
            cfg.fingerprint.points = p;
        }
        if let Some(l) = self.lambda {
            cfg.fingerprint.sampler.lambda = l;
        }
        if let Some(d) = self.delta {
            cfg.fingerprint.sampler.delta = d;
        }
        if let Some(f) = self.form {
            cfg.score_form = f;
        }
        cfg.validate().stage("validate config")?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Whole pipeline: data, victim, zoo, fingerprint, scores, AUC, artifacts.
    Run {
        #[command(flatten)]
        common: Common,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "dataset.json")]
        out: PathBuf,
    },
    /// Train the victim on the dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "victim.json")]
        out: PathBuf,
    },
    /// Build the surrogate and independent zoo around a victim.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        victim: PathBuf,
        #[arg(long, default_value = "zoo")]
        out: PathBuf,
    },
    /// Sample the victim's stationary-point fingerprint.
    Fingerprint {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        victim: PathBuf,
        #[arg(long, default_value = "fingerprint.json")]
        out: PathBuf,
    },
    /// Score every zoo model against a fingerprint.
    Score {
        #[arg(long)]
        fingerprint: PathBuf,
        /// Zoo directory written by `attack` or `run`.
        #[arg(long)]
        zoo: PathBuf,
        #[arg(long, default_value = "percentile")]
        form: ScoreForm,
        /// Fixed threshold; by default calibrated on the zoo's independents.
        #[arg(long)]
        threshold: Option<f64>,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute the AUC table from results.csv alone.
    Report {
        #[arg(long)]
        results: PathBuf,
        /// JSON destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Run { .. } => "run",
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Attack { .. } => "attack",
            Command::Fingerprint { .. } => "fingerprint",
            Command::Score { .. } => "score",
            Command::Report { .. } => "report",
        }
    }
}

#[derive(Debug)]
struct Failure {
    stage: &'static str,
    message: String,
}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, Failure>;
}

impl<T, E: std::fmt::Display> Stage<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            stage,
            message: e.to_string(),
        })
    }
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    command: &'a str,
    stage: &'a str,
    message: &'a str,
}

fn write_json(out: Option<&Path>, value: &impl Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).stage("serialize")?;
    match out {
        Some(p) => std::fs::write(p, text + "\n").stage("write output"),
        None => writeln!(std::io::stdout(), "{text}").stage("write output"),
    }
}

fn execute(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run { common, out } => {
            let mut cfg = common.load()?;
            if out.is_some() {
                cfg.output_dir = out;
            }
            if cfg.output_dir.is_none() {
                cfg.output_dir = Some(PathBuf::from("results"));
            }
            let outcome = experiment::run(&cfg).stage("pipeline")?;
            let dir = cfg.output_dir.as_deref().expect("set above");
            info!("wrote {} in {:.1} s", dir.display(), outcome.report.seconds);
            write_json(None, &outcome.report.auc)
        }
        Command::GenData { common, out } => {
            let cfg = common.load()?;
            let graphs = generate_dataset(&cfg.dataset_spec()).stage("generate dataset")?;
            save_dataset(&out, &graphs).stage("write dataset")
        }
        Command::Train { common, dataset, out } => {
            let cfg = common.load()?;
            let graphs = load_dataset(&dataset).stage("load dataset")?;
            let victim = train_victim(&graphs, &cfg.zoo_plan()).stage("train victim")?;
            save_model(&out, &victim).stage("write victim")
        }
        Command::Attack {
            common,
            dataset,
            victim,
            out,
        } => {
            let cfg = common.load()?;
            let graphs = load_dataset(&dataset).stage("load dataset")?;
            let victim = load_model(&victim).stage("load victim")?;
            let zoo = build_zoo(&victim, &graphs, &cfg.dataset_spec(), &cfg.zoo_plan()).stage("build zoo")?;
            save_zoo(&out, &zoo).stage("write zoo").map(drop)
        }
        Command::Fingerprint {
            common,
            dataset,
            victim,
            out,
        } => {
            let cfg = common.load()?;
            let graphs = load_dataset(&dataset).stage("load dataset")?;
            let victim = load_model(&victim).stage("load victim")?;
            let fp = sample_fingerprint(
                &victim,
                "victim",
                &graphs,
                cfg.fingerprint.points,
                &cfg.fingerprint.sampler,
                cfg.fingerprint_seed(0),
            )
            .stage("sample fingerprint")?;
            fp.save(&out).stage("write fingerprint")
        }
        Command::Score {
            fingerprint,
            zoo,
            form,
            threshold,
            out,
        } => {
            let fp = Fingerprint::load(&fingerprint).stage("load fingerprint")?;
            let zoo = load_zoo(&zoo).stage("load zoo")?;
            let mut models: Vec<(String, &dyn EmbeddingModel, String)> =
                vec![("victim".into(), &zoo.victim, zoo.victim.architecture().to_string())];
            models.extend(zoo.entries().map(|e| (e.id.clone(), &*e.model, e.arch.to_string())));
            let reports = models
                .iter()
                .map(|(id, m, _)| score(*m, id, &fp, form))
                .collect::<statprint::Result<Vec<_>>>()
                .stage("score")?;
            let theta = match threshold {
                Some(t) => Threshold::fixed(t, form),
                None => {
                    let ind: Vec<f64> = models
                        .iter()
                        .zip(&reports)
                        .filter(|((id, _, _), _)| zoo.get(id).is_some_and(|e| e.role == Role::Independent))
                        .map(|(_, r)| r.score_in(form))
                        .collect();
                    Threshold::from_scores(&ind, form)
                }
            }
            .stage("threshold")?;
            let rows: Vec<ScoreRow> = models
                .iter()
                .zip(&reports)
                .map(|((id, m, arch), r)| ScoreRow {
                    id: id.clone(),
                    arch: arch.clone(),
                    dim: m.embedding_dim(),
                    beta_ratio: r.beta_ratio,
                    beta_percentile: r.beta_percentile,
                    verdict: classify(r.score_in(form), theta.value).to_string(),
                })
                .collect();
            match out {
                Some(p) => write_score_rows(File::create(p).stage("create output")?, &rows),
                None => write_score_rows(std::io::stdout(), &rows),
            }
            .stage("write scores")
        }
        Command::Report { results, out } => {
            let rows = read_results(&results).stage("read results")?;
            let table: BTreeMap<String, BTreeMap<ScoreForm, f64>> = auc_table(&rows).stage("auc")?;
            write_json(out.as_deref(), &table)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let name = cli.command.name();
    let pool = match cli.jobs {
        Some(0) => Err(Failure {
            stage: "arguments",
            message: "--jobs must be >= 1".into(),
        }),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .stage("thread pool"),
        None => Ok(()),
    };
    match pool.and_then(|()| execute(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let report = ErrorReport {
                command: name,
                stage: f.stage,
                message: &f.message,
            };
            let text = serde_json::to_string(&serde_json::json!({ "error": report })).unwrap_or_default();
            eprintln!("{text}");
            ExitCode::FAILURE
        }
    }
}
