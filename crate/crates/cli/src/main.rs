//! `lola`: command line driver for the experiment harness.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use lola_core::analysis::ScaleRule;
use lola_core::harness::{
    run_in_dir, run_suite, AblationExperiment, CollisionExperiment, DistillExperiment, Experiment, ExperimentConfig,
    FeatureMapSource, GramExperiment, KeyDistribution, OutputFormat, Policy, RecallExperiment, RecallRun, SuiteConfig,
    SuiteReport, SyntheticTaskSpec, TaskConfig,
};
use lola_core::Scorer;

const DEFAULT_SUITE: &str = include_str!("../../../configs/default-suite.toml");

#[derive(Parser, Debug)]
#[command(name = "lola", version, about = "Fixed-memory attention experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Base seed; every artifact is a pure function of configuration and seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory receiving tables and the manifest.
    #[arg(long, global = true, default_value = "results")]
    out_dir: PathBuf,
    /// TOML configuration. For `suite` a full suite; for other subcommands
    /// the fields of one experiment of that kind.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Csv,
    Json,
}

impl From<Format> for OutputFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => OutputFormat::Csv,
            Format::Json => OutputFormat::Json,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Needle-in-a-haystack recall for one policy.
    Recall(RecallArgs),
    /// Compare eviction scores at a fixed budget.
    AblateScores(AblateArgs),
    /// Self-recall error matrices of linear-only, window-only and lola.
    Collisions(CollisionArgs),
    /// Truncated-SVD floors of the exponential kernel Gram matrix.
    GramStudy(GramArgs),
    /// Distill a feature map against softmax attention and save it as JSON.
    Distill(DistillArgs),
    /// Run a suite of experiments into a timestamped directory.
    Suite,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskKind {
    /// One key cluster with a needle on the same sphere.
    SingleTopic,
    /// Independent Gaussian keys.
    Gaussian,
}

#[derive(Args, Debug)]
struct TaskArgs {
    #[arg(long, value_enum, default_value_t = TaskKind::SingleTopic)]
    task: TaskKind,
    /// Haystack length.
    #[arg(long, default_value_t = 512)]
    n: usize,
    /// Head dimension.
    #[arg(long, default_value_t = 16)]
    d: usize,
    /// `random`, `random:<seed>`, `distilled`, or a feature-map JSON path.
    #[arg(long, default_value = "distilled")]
    feature_map: String,
    /// Feature dimension; twice the head dimension when unset.
    #[arg(long)]
    feature_dim: Option<usize>,
}

impl TaskArgs {
    fn task(&self) -> TaskConfig {
        let spec = match self.task {
            TaskKind::SingleTopic => SyntheticTaskSpec::single_topic(self.n, self.d, 0),
            TaskKind::Gaussian => SyntheticTaskSpec::new(self.n, 1, self.d, KeyDistribution::Gaussian, 16, 0),
        };
        TaskConfig::from(&spec)
    }

    fn feature_map(&self, seed: u64) -> FeatureMapSource {
        match self.feature_map.as_str() {
            "distilled" => FeatureMapSource::default(),
            "random" => FeatureMapSource::Random { seed },
            s => match s.strip_prefix("random:").map(str::parse::<u64>) {
                Some(Ok(seed)) => FeatureMapSource::Random { seed },
                _ => FeatureMapSource::File { path: s.into() },
            },
        }
    }
}

#[derive(Args, Debug)]
struct RecallArgs {
    #[command(flatten)]
    task: TaskArgs,
    /// `linear-only`, `window-only`, `lola` or `lola-altscore:<score>`.
    #[arg(long, default_value = "lola")]
    policy: String,
    #[arg(long, default_value_t = 64)]
    window: usize,
    #[arg(long, default_value_t = 64)]
    sparse: usize,
    /// Consume the haystack by chunked prefill with this chunk size.
    #[arg(long)]
    chunk: Option<usize>,
    #[arg(long, default_value_t = 100)]
    trials: usize,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, default_value_t = 64)]
    window: usize,
    #[arg(long, default_value_t = 64)]
    sparse: usize,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Fail unless the expected ranking holds up to neighbour swaps.
    #[arg(long)]
    check: bool,
}

#[derive(Args, Debug)]
struct CollisionArgs {
    #[arg(long, default_value_t = 256)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long, default_value_t = 16)]
    window: usize,
    #[arg(long, default_value_t = 16)]
    sparse: usize,
    #[arg(long, default_value_t = 1.0)]
    key_scale: f64,
    /// Fail unless mean error orders lola <= window-only <= linear-only.
    #[arg(long)]
    check: bool,
}

#[derive(Args, Debug)]
struct GramArgs {
    #[arg(long, value_delimiter = ',', default_value = "128,256,512")]
    n: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "8,16,64")]
    d: Vec<usize>,
    #[arg(long, default_value_t = 128)]
    max_rank: usize,
    /// Input standard deviation; `d^(-1/4)` when unset.
    #[arg(long)]
    std_dev: Option<f64>,
    /// Also compare random and distilled maps against the rank floor.
    #[arg(long)]
    check_floor: bool,
}

#[derive(Args, Debug)]
struct DistillArgs {
    #[arg(long, default_value_t = 8)]
    d: usize,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long, default_value_t = 8)]
    sequences: usize,
    #[arg(long, default_value_t = 32)]
    length: usize,
    #[arg(long, default_value_t = 1.0)]
    key_scale: f64,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0.05)]
    learning_rate: f64,
}

fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("invalid configuration {}", path.display()))
}

/// The experiment a single-experiment subcommand runs.
fn experiment(command: &Command, common: &Common, seed: u64) -> Result<Experiment> {
    let from_file = common.config.as_deref();
    Ok(match command {
        Command::Recall(a) => Experiment::Recall(match from_file {
            Some(p) => load_toml(p)?,
            None => {
                let policy: Policy = a.policy.parse().map_err(anyhow::Error::msg)?;
                let mut config = ExperimentConfig::new(policy, a.window, a.sparse, a.trials)
                    .with_feature_map(a.task.feature_map(seed));
                config.chunk = a.chunk;
                config.feature_dim = a.task.feature_dim;
                RecallExperiment {
                    name: "recall".into(),
                    task: a.task.task(),
                    lengths: Vec::new(),
                    runs: vec![RecallRun {
                        label: a.policy.clone(),
                        config,
                    }],
                    checks: Vec::new(),
                }
            }
        }),
        Command::AblateScores(a) => Experiment::Ablation(match from_file {
            Some(p) => load_toml(p)?,
            None => AblationExperiment {
                name: "ablation".into(),
                task: a.task.task(),
                window: a.window,
                sparse: a.sparse,
                trials: a.trials,
                strategies: Scorer::ALL.to_vec(),
                feature_map: a.task.feature_map(seed),
                check_ordering: a.check,
            },
        }),
        Command::Collisions(a) => Experiment::Collisions(match from_file {
            Some(p) => load_toml(p)?,
            None => CollisionExperiment {
                name: "collisions".into(),
                steps: a.steps,
                d: a.d,
                window: a.window,
                sparse: a.sparse,
                key_scale: a.key_scale,
                feature_seed: None,
                check_ordering: a.check,
            },
        }),
        Command::GramStudy(a) => Experiment::GramStudy(match from_file {
            Some(p) => load_toml(p)?,
            None => GramExperiment {
                name: "gram".into(),
                n: a.n.clone(),
                d: a.d.clone(),
                max_rank: a.max_rank,
                scale: a.std_dev.map_or(ScaleRule::InverseFourthRootDim, ScaleRule::Fixed),
                dominance: Vec::new(),
                check_floor: a.check_floor,
            },
        }),
        Command::Distill(a) => Experiment::Distill(match from_file {
            Some(p) => load_toml(p)?,
            None => DistillExperiment {
                name: "distill".into(),
                d: a.d,
                feature_dim: a.feature_dim,
                sequences: a.sequences,
                length: a.length,
                key_scale: a.key_scale,
                steps: a.steps,
                learning_rate: a.learning_rate,
                check_decrease: true,
            },
        }),
        Command::Suite => unreachable!("suites are loaded separately"),
    })
}

fn print_report(report: &SuiteReport) {
    for outcome in &report.outcomes {
        println!("== {} ({})", outcome.name, outcome.kind);
        for r in &outcome.records {
            println!(
                "  {:<24} n={:<5} window={:<4} sparse={:<4} accuracy={:.3} ({}/{})",
                r.label, r.n, r.window, r.sparse, r.accuracy, r.matches, r.trials
            );
        }
        for f in &outcome.files {
            println!("  wrote {}", f.path);
        }
        for c in &outcome.checks {
            println!("  {} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.check, c.detail);
        }
        eprintln!("  [{}] wall time {:.2}s", outcome.name, outcome.wall_time_secs);
    }
    for e in &report.manifest.errors {
        println!("ERROR {}: {}", e.experiment, e.message);
    }
    println!("results in {}", report.dir.display());
}

fn run(cli: Cli) -> Result<bool> {
    let format = OutputFormat::from(cli.common.format);
    let start = Instant::now();
    let report = match &cli.command {
        Command::Suite => {
            let mut suite = match &cli.common.config {
                Some(p) => SuiteConfig::load(p)?,
                None => SuiteConfig::from_toml(DEFAULT_SUITE, Path::new("default-suite.toml"))?,
            };
            if let Some(seed) = cli.common.seed {
                suite.seed = seed;
            }
            run_suite(&suite, &cli.common.out_dir, format)?
        }
        command => {
            let seed = cli.common.seed.unwrap_or(1);
            let suite = SuiteConfig {
                seed,
                experiments: vec![experiment(command, &cli.common, seed)?],
            };
            if let Err(e) = suite.validate() {
                bail!("invalid configuration: {e}");
            }
            run_in_dir(&suite, &cli.common.out_dir, format)?
        }
    };
    print_report(&report);
    eprintln!("total wall time {:.2}s", start.elapsed().as_secs_f64());
    Ok(report.passed())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
