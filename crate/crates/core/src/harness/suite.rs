//! Declarative experiment suites.
//!
//! A suite is a TOML file with a base `seed` and a list of `[[experiment]]`
//! tables, each tagged by `kind`. Every experiment writes its tables into
//! one output directory, and a `manifest.json` there records the parsed
//! configuration, the seed, the tool version, a SHA-256 checksum per file,
//! and the outcome of every declared check. The manifest is rewritten after
//! each experiment, so an interrupted or failing run keeps what it finished.
//!
//! Artifacts depend only on the configuration and seed; wall times are
//! reported to the caller but never written.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::niah::{KeyDistribution, SyntheticTaskSpec};
use super::recall::{
    eval_recall_with, ordering_violations, run_ablation, ExperimentConfig, FeatureMapSource, ResultRecord,
    ABLATION_ORDER,
};
use crate::analysis::{
    approximation_error, collision_matrices, gram_study_cell, study_inputs, CollisionMatrix, GramStudyResult,
    MemoryPolicy, ScaleRule,
};
use crate::attention::{
    distill_feature_map, pairs_from_stream, synthetic_teacher_corpus, AttentionConfig, FeatureMapParams,
};
use crate::error::{Error, Result};
use crate::numerics::{gaussian_sample, SeededRng};
use crate::scoring::Scorer;

/// z-value of a one-sided 95% normal bound.
pub const Z_95_ONE_SIDED: f64 = 1.644_853_626_951_472_2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

impl OutputFormat {
    pub fn extension(self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
        }
    }
}

impl fmt::Display for OutputFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.extension())
    }
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::InvalidConfig(format!(
                "unknown format {other:?}; expected csv or json"
            ))),
        }
    }
}

/// Haystack description without a seed; the suite supplies it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub haystack_len: usize,
    #[serde(default = "one")]
    pub needle_count: usize,
    pub d: usize,
    pub key_distribution: KeyDistribution,
    pub value_codebook_size: usize,
    #[serde(default = "unit")]
    pub key_scale: f64,
    #[serde(default = "four")]
    pub clusters: usize,
    #[serde(default = "tenth")]
    pub cluster_spread: f64,
    #[serde(default)]
    pub value_noise: f64,
    #[serde(default)]
    pub probe_noise: f64,
}

fn one() -> usize {
    1
}

fn four() -> usize {
    4
}

fn unit() -> f64 {
    1.0
}

fn tenth() -> f64 {
    0.1
}

impl TaskConfig {
    pub fn spec(&self, seed: u64) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            haystack_len: self.haystack_len,
            needle_count: self.needle_count,
            d: self.d,
            key_distribution: self.key_distribution,
            value_codebook_size: self.value_codebook_size,
            seed,
            key_scale: self.key_scale,
            clusters: self.clusters,
            cluster_spread: self.cluster_spread,
            value_noise: self.value_noise,
            probe_noise: self.probe_noise,
        }
    }
}

impl From<&SyntheticTaskSpec> for TaskConfig {
    fn from(s: &SyntheticTaskSpec) -> Self {
        Self {
            haystack_len: s.haystack_len,
            needle_count: s.needle_count,
            d: s.d,
            key_distribution: s.key_distribution,
            value_codebook_size: s.value_codebook_size,
            key_scale: s.key_scale,
            clusters: s.clusters,
            cluster_spread: s.cluster_spread,
            value_noise: s.value_noise,
            probe_noise: s.probe_noise,
        }
    }
}

/// A labelled recall run inside a recall experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecallRun {
    pub label: String,
    #[serde(flatten)]
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RecallCheck {
    /// One-sided 95% lower bound of `accuracy(better) − accuracy(worse)` is
    /// at least `margin`.
    Margin {
        better: String,
        worse: String,
        margin: f64,
    },
    /// Accuracy does not decrease along `runs`.
    Nondecreasing {
        runs: Vec<String>,
    },
    MinAccuracy {
        run: String,
        accuracy: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecallExperiment {
    pub name: String,
    pub task: TaskConfig,
    /// Haystack lengths to sweep; `task.haystack_len` alone when empty.
    #[serde(default)]
    pub lengths: Vec<usize>,
    #[serde(rename = "run")]
    pub runs: Vec<RecallRun>,
    #[serde(default, rename = "check")]
    pub checks: Vec<RecallCheck>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationExperiment {
    pub name: String,
    pub task: TaskConfig,
    pub window: usize,
    pub sparse: usize,
    pub trials: usize,
    pub strategies: Vec<Scorer>,
    #[serde(default)]
    pub feature_map: FeatureMapSource,
    /// Check the expected ranking, allowing swaps of neighbouring rows.
    #[serde(default)]
    pub check_ordering: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollisionExperiment {
    pub name: String,
    pub steps: usize,
    pub d: usize,
    pub window: usize,
    pub sparse: usize,
    /// Standard deviation of key entries; values are standard normal.
    #[serde(default = "unit")]
    pub key_scale: f64,
    /// Seed of the random feature map; the suite seed when unset.
    #[serde(default)]
    pub feature_seed: Option<u64>,
    /// Check mean error lola ≤ window-only ≤ linear-only.
    #[serde(default)]
    pub check_ordering: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GramCell {
    pub n: usize,
    pub d: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dominance {
    pub larger: GramCell,
    pub smaller: GramCell,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GramExperiment {
    pub name: String,
    pub n: Vec<usize>,
    pub d: Vec<usize>,
    pub max_rank: usize,
    #[serde(default = "default_scale_rule")]
    pub scale: ScaleRule,
    /// Truncated-error curves that must dominate at every rank ≤ `max_rank`.
    #[serde(default)]
    pub dominance: Vec<Dominance>,
    /// Compare random and distilled feature maps against the rank floor.
    #[serde(default)]
    pub check_floor: bool,
}

fn default_scale_rule() -> ScaleRule {
    ScaleRule::InverseFourthRootDim
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillExperiment {
    pub name: String,
    pub d: usize,
    #[serde(default)]
    pub feature_dim: Option<usize>,
    pub sequences: usize,
    pub length: usize,
    #[serde(default = "unit")]
    pub key_scale: f64,
    pub steps: usize,
    pub learning_rate: f64,
    /// Check that the final loss is below the initial loss.
    #[serde(default)]
    pub check_decrease: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Experiment {
    Recall(RecallExperiment),
    Ablation(AblationExperiment),
    Collisions(CollisionExperiment),
    GramStudy(GramExperiment),
    Distill(DistillExperiment),
}

impl Experiment {
    pub fn name(&self) -> &str {
        match self {
            Experiment::Recall(e) => &e.name,
            Experiment::Ablation(e) => &e.name,
            Experiment::Collisions(e) => &e.name,
            Experiment::GramStudy(e) => &e.name,
            Experiment::Distill(e) => &e.name,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::Recall(_) => "recall",
            Experiment::Ablation(_) => "ablation",
            Experiment::Collisions(_) => "collisions",
            Experiment::GramStudy(_) => "gram-study",
            Experiment::Distill(_) => "distill",
        }
    }

    fn validate(&self) -> Result<()> {
        let name = self.name();
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(Error::InvalidConfig(format!(
                "experiment name {name:?} must be non-empty and use only letters, digits, '-' and '_'"
            )));
        }
        match self {
            Experiment::Recall(e) => {
                if e.runs.is_empty() {
                    return Err(Error::InvalidConfig(format!("recall experiment {name} has no runs")));
                }
                for r in &e.runs {
                    r.config.validate()?;
                }
                for c in &e.checks {
                    let labels: Vec<&String> = match c {
                        RecallCheck::Margin { better, worse, .. } => vec![better, worse],
                        RecallCheck::Nondecreasing { runs } => runs.iter().collect(),
                        RecallCheck::MinAccuracy { run, .. } => vec![run],
                    };
                    for l in labels {
                        if !e.runs.iter().any(|r| &r.label == l) {
                            return Err(Error::InvalidConfig(format!("check in {name} names unknown run {l:?}")));
                        }
                    }
                }
                e.task.spec(0).validate()
            }
            Experiment::Ablation(e) => {
                if e.strategies.is_empty() {
                    return Err(Error::InvalidConfig(format!("ablation {name} has no strategies")));
                }
                if e.trials == 0 {
                    return Err(Error::InvalidConfig(format!(
                        "ablation {name} needs at least one trial"
                    )));
                }
                e.task.spec(0).validate()
            }
            Experiment::Collisions(e) => {
                if e.steps == 0 || e.d == 0 {
                    return Err(Error::InvalidConfig(format!("collisions {name} needs steps and d ≥ 1")));
                }
                Ok(())
            }
            Experiment::GramStudy(e) => {
                if e.n.is_empty() || e.d.is_empty() {
                    return Err(Error::InvalidConfig(format!("gram study {name} needs n and d lists")));
                }
                for dom in &e.dominance {
                    for cell in [dom.larger, dom.smaller] {
                        if !e.n.contains(&cell.n) || !e.d.contains(&cell.d) {
                            return Err(Error::InvalidConfig(format!(
                                "dominance check in {name} names cell n={} d={} outside the grid",
                                cell.n, cell.d
                            )));
                        }
                    }
                }
                Ok(())
            }
            Experiment::Distill(e) => {
                if e.sequences == 0 || e.length == 0 {
                    return Err(Error::InvalidConfig(format!(
                        "distill {name} needs sequences and length ≥ 1"
                    )));
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub seed: u64,
    #[serde(default, rename = "experiment")]
    pub experiments: Vec<Experiment>,
}

impl SuiteConfig {
    /// Parses and validates a suite. `origin` names the source in errors.
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let config: SuiteConfig = toml::from_str(text).map_err(|e| Error::Config {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        config.validate().map_err(|e| Error::Config {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        let mut names: Vec<&str> = Vec::new();
        for e in &self.experiments {
            e.validate()?;
            if names.contains(&e.name()) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate experiment name {:?}",
                    e.name()
                )));
            }
            names.push(e.name());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub experiment: String,
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Path relative to the output directory.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentError {
    pub experiment: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub format: OutputFormat,
    pub config: serde_json::Value,
    pub files: Vec<FileEntry>,
    pub checks: Vec<CheckResult>,
    pub errors: Vec<ExperimentError>,
    pub passed: bool,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// What one experiment produced.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub name: String,
    pub kind: &'static str,
    pub files: Vec<FileEntry>,
    pub checks: Vec<CheckResult>,
    pub records: Vec<ResultRecord>,
    pub wall_time_secs: f64,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub outcomes: Vec<ExperimentOutcome>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.manifest.passed
    }
}

/// Runs `config` into a fresh timestamped directory under `out_root`.
pub fn run_suite(config: &SuiteConfig, out_root: &Path, format: OutputFormat) -> Result<SuiteReport> {
    fs::create_dir_all(out_root)?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ").to_string();
    let mut dir = out_root.join(format!("suite-{stamp}"));
    let mut k = 1;
    while dir.exists() {
        dir = out_root.join(format!("suite-{stamp}-{k}"));
        k += 1;
    }
    run_in_dir(config, &dir, format)
}

/// Runs `config`, writing into `dir` (created if missing). Experiments that
/// fail are recorded in the manifest and the rest still run.
pub fn run_in_dir(config: &SuiteConfig, dir: &Path, format: OutputFormat) -> Result<SuiteReport> {
    config.validate()?;
    fs::create_dir_all(dir)?;
    let mut manifest = Manifest {
        tool: "lola".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: config.seed,
        format,
        config: serde_json::to_value(config)?,
        files: Vec::new(),
        checks: Vec::new(),
        errors: Vec::new(),
        passed: true,
    };
    write_manifest(dir, &manifest)?;
    let mut outcomes = Vec::new();
    for exp in &config.experiments {
        let start = Instant::now();
        let mut out = Output {
            dir,
            format,
            files: Vec::new(),
        };
        match run_experiment(exp, config.seed, &mut out) {
            Ok((checks, records)) => {
                manifest.files.extend(out.files.iter().cloned());
                manifest.checks.extend(checks.iter().cloned());
                outcomes.push(ExperimentOutcome {
                    name: exp.name().to_string(),
                    kind: exp.kind(),
                    files: out.files,
                    checks,
                    records,
                    wall_time_secs: start.elapsed().as_secs_f64(),
                });
            }
            Err(e) => {
                manifest.files.extend(out.files);
                manifest.errors.push(ExperimentError {
                    experiment: exp.name().to_string(),
                    message: e.to_string(),
                });
            }
        }
        manifest.passed = manifest.errors.is_empty() && manifest.checks.iter().all(|c| c.passed);
        write_manifest(dir, &manifest)?;
    }
    Ok(SuiteReport {
        dir: dir.to_path_buf(),
        manifest,
        outcomes,
    })
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Output<'a> {
    dir: &'a Path,
    format: OutputFormat,
    files: Vec<FileEntry>,
}

impl Output<'_> {
    fn write_bytes(&mut self, name: String, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.join(&name), bytes)?;
        self.files.push(FileEntry {
            path: name,
            bytes: bytes.len() as u64,
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    /// Writes `rows` as `<stem>.csv` or `<stem>.json`.
    fn table<T: Serialize>(&mut self, stem: &str, rows: &[T]) -> Result<()> {
        let bytes = match self.format {
            OutputFormat::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                for r in rows {
                    w.serialize(r)?;
                }
                w.into_inner().map_err(|e| Error::Io(e.into_error()))?
            }
            OutputFormat::Json => json_bytes(rows)?,
        };
        self.write_bytes(format!("{stem}.{}", self.format.extension()), &bytes)
    }

    fn matrix(&mut self, stem: &str, m: &CollisionMatrix) -> Result<()> {
        let bytes = match self.format {
            OutputFormat::Csv => {
                let mut buf = Vec::new();
                m.write_csv(&mut buf)?;
                buf
            }
            OutputFormat::Json => {
                let rows: Vec<Vec<Option<f64>>> = (0..m.steps())
                    .map(|r| (0..m.steps()).map(|c| m.cell(r, c).value()).collect())
                    .collect();
                json_bytes(&serde_json::json!({
                    "policy": m.policy,
                    "relative": m.relative,
                    "rows": rows,
                }))?
            }
        };
        self.write_bytes(format!("{stem}.{}", self.format.extension()), &bytes)
    }
}

fn json_bytes<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

type Ran = (Vec<CheckResult>, Vec<ResultRecord>);

fn run_experiment(exp: &Experiment, seed: u64, out: &mut Output<'_>) -> Result<Ran> {
    match exp {
        Experiment::Recall(e) => run_recall_experiment(e, seed, out),
        Experiment::Ablation(e) => run_ablation_experiment(e, seed, out),
        Experiment::Collisions(e) => run_collision_experiment(e, seed, out).map(|c| (c, Vec::new())),
        Experiment::GramStudy(e) => run_gram_experiment(e, seed, out).map(|c| (c, Vec::new())),
        Experiment::Distill(e) => run_distill_experiment(e, seed, out).map(|c| (c, Vec::new())),
    }
}

fn check(experiment: &str, check: String, passed: bool, detail: String) -> CheckResult {
    CheckResult {
        experiment: experiment.to_string(),
        check,
        passed,
        detail,
    }
}

/// One-sided 95% lower bound of `p_a − p_b` for two independent binomial
/// proportions (normal approximation).
pub fn difference_lower_bound(a: &ResultRecord, b: &ResultRecord) -> f64 {
    let var = |r: &ResultRecord| r.accuracy * (1.0 - r.accuracy) / r.trials as f64;
    a.accuracy - b.accuracy - Z_95_ONE_SIDED * (var(a) + var(b)).sqrt()
}

fn run_recall_experiment(e: &RecallExperiment, seed: u64, out: &mut Output<'_>) -> Result<Ran> {
    let lengths = if e.lengths.is_empty() {
        vec![e.task.haystack_len]
    } else {
        e.lengths.clone()
    };
    let mut maps: Vec<((FeatureMapSource, Option<usize>), FeatureMapParams)> = Vec::new();
    let mut records = Vec::new();
    let mut checks = Vec::new();
    for &n in &lengths {
        let spec = TaskConfig {
            haystack_len: n,
            ..e.task.clone()
        }
        .spec(seed);
        let mut batch: Vec<ResultRecord> = Vec::new();
        for run in &e.runs {
            let key = (run.config.feature_map.clone(), run.config.feature_dim);
            let params = match maps.iter().find(|(k, _)| *k == key) {
                Some((_, p)) => p.clone(),
                None => {
                    let p = run.config.feature_map.resolve(&spec, &run.config.attention(&spec)?)?;
                    maps.push((key, p.clone()));
                    p
                }
            };
            let mut r = eval_recall_with(&run.config, &spec, &params)?;
            r.label = run.label.clone();
            batch.push(r);
        }
        let find = |l: &str| batch.iter().find(|r| r.label == l).expect("labels validated");
        for c in &e.checks {
            checks.push(match c {
                RecallCheck::Margin { better, worse, margin } => {
                    let (a, b) = (find(better), find(worse));
                    let lb = difference_lower_bound(a, b);
                    check(
                        &e.name,
                        format!("n={n}: {better} beats {worse} by {margin}"),
                        lb >= *margin,
                        format!(
                            "accuracy {:.4} vs {:.4}, 95% lower bound of difference {lb:.4}",
                            a.accuracy, b.accuracy
                        ),
                    )
                }
                RecallCheck::Nondecreasing { runs } => {
                    let accs: Vec<f64> = runs.iter().map(|l| find(l).accuracy).collect();
                    check(
                        &e.name,
                        format!("n={n}: accuracy nondecreasing along {}", runs.join(", ")),
                        accs.windows(2).all(|w| w[0] <= w[1]),
                        format!("{accs:?}"),
                    )
                }
                RecallCheck::MinAccuracy { run, accuracy } => {
                    let a = find(run).accuracy;
                    check(
                        &e.name,
                        format!("n={n}: {run} accuracy at least {accuracy}"),
                        a >= *accuracy,
                        format!("{a:.4}"),
                    )
                }
            });
        }
        records.extend(batch);
    }
    out.table(&e.name, &records)?;
    Ok((checks, records))
}

fn run_ablation_experiment(e: &AblationExperiment, seed: u64, out: &mut Output<'_>) -> Result<Ran> {
    let spec = e.task.spec(seed);
    let records = run_ablation(&spec, &e.strategies, e.window, e.sparse, e.trials, &e.feature_map)?;
    out.table(&e.name, &records)?;
    let mut checks = Vec::new();
    if e.check_ordering {
        let violations = ordering_violations(&records, &ABLATION_ORDER, 1);
        let accs: Vec<String> = records
            .iter()
            .map(|r| format!("{}={:.3}", r.label, r.accuracy))
            .collect();
        checks.push(check(
            &e.name,
            format!("ranking {} up to neighbour swaps", ABLATION_ORDER.join(" >= ")),
            violations.is_empty(),
            if violations.is_empty() {
                accs.join(" ")
            } else {
                format!("{} inverted: {violations:?}", accs.join(" "))
            },
        ));
    }
    Ok((checks, records))
}

/// Summary row of one policy's collision matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionSummary {
    pub policy: String,
    pub window: usize,
    pub sparse: usize,
    pub steps: usize,
    pub mean_error: f64,
    pub mean_absorbed_error: f64,
    pub absorbed_cells: usize,
    pub mean_relative_error: f64,
}

/// Key/value stream of a collision experiment.
pub fn collision_stream(e: &CollisionExperiment, seed: u64) -> Result<Vec<crate::attention::KVPair>> {
    let mut rng = SeededRng::new(seed);
    let ks = gaussian_sample(&mut rng, e.steps, e.d, e.key_scale)?;
    let vs = gaussian_sample(&mut rng, e.steps, e.d, 1.0)?;
    pairs_from_stream(&ks, &vs)
}

/// Absolute and relative matrices for linear-only, window-only and lola, in
/// that order.
pub fn collision_policies(
    e: &CollisionExperiment,
    seed: u64,
) -> Result<Vec<(MemoryPolicy, CollisionMatrix, CollisionMatrix)>> {
    let attention = AttentionConfig::new(e.d)?;
    let params = FeatureMapParams::init(&mut SeededRng::new(e.feature_seed.unwrap_or(seed)), &attention)?;
    let pairs = collision_stream(e, seed)?;
    [
        MemoryPolicy::LinearOnly,
        MemoryPolicy::WindowOnly { window: e.window },
        MemoryPolicy::Lola {
            window: e.window,
            sparse: e.sparse,
        },
    ]
    .into_iter()
    .map(|p| collision_matrices(&pairs, p, attention, &params).map(|(a, r)| (p, a, r)))
    .collect()
}

fn run_collision_experiment(e: &CollisionExperiment, seed: u64, out: &mut Output<'_>) -> Result<Vec<CheckResult>> {
    let results = collision_policies(e, seed)?;
    let mut summary = Vec::new();
    for (policy, abs, rel) in &results {
        out.matrix(&format!("{}-{}", e.name, policy.label()), abs)?;
        out.matrix(&format!("{}-{}-relative", e.name, policy.label()), rel)?;
        let cache = policy.cache_config();
        summary.push(CollisionSummary {
            policy: policy.label().to_string(),
            window: cache.window,
            sparse: cache.sparse,
            steps: e.steps,
            mean_error: abs.mean_seen(),
            mean_absorbed_error: abs.mean_absorbed(),
            absorbed_cells: abs.absorbed_cells(),
            mean_relative_error: rel.mean_absorbed(),
        });
    }
    out.table(&format!("{}-summary", e.name), &summary)?;
    let mut checks = Vec::new();
    if e.check_ordering {
        let (lin, win, lola) = (&summary[0], &summary[1], &summary[2]);
        checks.push(check(
            &e.name,
            "mean error lola <= window-only <= linear-only".into(),
            lola.mean_error <= win.mean_error && win.mean_error <= lin.mean_error,
            format!(
                "{:.4} <= {:.4} <= {:.4} (absorbed only: {:.4}, {:.4}, {:.4})",
                lola.mean_error,
                win.mean_error,
                lin.mean_error,
                lola.mean_absorbed_error,
                win.mean_absorbed_error,
                lin.mean_absorbed_error
            ),
        ));
        let (_, lola_abs, _) = &results[2];
        let resident_zero = (0..lola_abs.steps()).all(|r| {
            (0..=r).all(|c| match lola_abs.cell(r, c) {
                crate::analysis::Cell::Sparse | crate::analysis::Cell::Window => {
                    lola_abs.cell(r, c).value() == Some(0.0)
                }
                _ => true,
            })
        });
        checks.push(check(
            &e.name,
            "resident cells are zero".into(),
            resident_zero,
            String::new(),
        ));
    }
    Ok(checks)
}

/// Row of a gram study table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramRow {
    pub n: usize,
    pub d: usize,
    pub std_dev: f64,
    pub rank: usize,
    /// `σ_rank`, empty at rank 0.
    pub singular_value: Option<f64>,
    pub truncated_error: f64,
}

/// Row comparing a feature map with the rank floor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FloorRow {
    pub n: usize,
    pub d: usize,
    pub feature_dim: usize,
    pub map: String,
    pub frobenius_error: f64,
    pub floor: f64,
}

fn run_gram_experiment(e: &GramExperiment, seed: u64, out: &mut Output<'_>) -> Result<Vec<CheckResult>> {
    let results = crate::analysis::rank_study(&e.n, &e.d, e.scale, seed)?;
    let mut rows = Vec::new();
    for r in &results {
        for rank in 0..=e.max_rank.min(r.n) {
            rows.push(GramRow {
                n: r.n,
                d: r.d,
                std_dev: r.std_dev,
                rank,
                singular_value: rank.checked_sub(1).map(|i| r.singular_values[i]),
                truncated_error: r.truncated_errors[rank],
            });
        }
    }
    out.table(&e.name, &rows)?;
    let find = |c: GramCell| -> &GramStudyResult {
        results
            .iter()
            .find(|r| r.n == c.n && r.d == c.d)
            .expect("cells validated against the grid")
    };
    let mut checks = Vec::new();
    for dom in &e.dominance {
        let (a, b) = (find(dom.larger), find(dom.smaller));
        let worst = (0..=e.max_rank)
            .map(|k| (k, a.floor(k) - b.floor(k)))
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .expect("rank range is non-empty");
        checks.push(check(
            &e.name,
            format!(
                "n={} d={} dominates n={} d={} up to rank {}",
                a.n, a.d, b.n, b.d, e.max_rank
            ),
            a.dominates(b, e.max_rank),
            format!("smallest gap {:.4e} at rank {}", worst.1, worst.0),
        ));
    }
    if e.check_floor {
        let floors = floor_rows(e, seed)?;
        let ok = floors.iter().all(|f| f.frobenius_error >= f.floor - 1e-6);
        out.table(&format!("{}-floor", e.name), &floors)?;
        checks.push(check(
            &e.name,
            "feature-map Gram error at least the rank floor".into(),
            ok,
            format!("{} maps compared", floors.len()),
        ));
    }
    Ok(checks)
}

/// Random and briefly distilled maps with `D = 2d`, on each cell's inputs.
fn floor_rows(e: &GramExperiment, seed: u64) -> Result<Vec<FloorRow>> {
    let mut rows = Vec::new();
    for &n in &e.n {
        for &d in &e.d {
            let cell = gram_study_cell(n, d, e.scale, seed)?;
            let xs = study_inputs(n, d, e.scale, seed)?;
            let attention = AttentionConfig::new(d)?;
            let mut rng = SeededRng::child(seed, ((n as u64) << 32) | d as u64 | 1 << 63);
            let random = FeatureMapParams::init(&mut rng, &attention)?;
            let corpus = synthetic_teacher_corpus(&mut rng, &attention, 4, 16, e.scale.std_dev(d))?;
            let distilled = distill_feature_map(&mut rng, &attention, &corpus, 20, 0.05)?.params;
            for (label, params) in [("random", random), ("distilled", distilled)] {
                rows.push(FloorRow {
                    n,
                    d,
                    feature_dim: attention.feature_dim,
                    map: label.into(),
                    frobenius_error: approximation_error(&params, &xs)?,
                    floor: cell.floor(attention.feature_dim),
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
}

fn run_distill_experiment(e: &DistillExperiment, seed: u64, out: &mut Output<'_>) -> Result<Vec<CheckResult>> {
    let attention = match e.feature_dim {
        Some(f) => AttentionConfig::with_feature_dim(e.d, f)?,
        None => AttentionConfig::new(e.d)?,
    };
    let mut rng = SeededRng::new(seed);
    let corpus = synthetic_teacher_corpus(&mut rng, &attention, e.sequences, e.length, e.key_scale)?;
    let result = distill_feature_map(&mut rng, &attention, &corpus, e.steps, e.learning_rate)?;
    let mut json = result.params.to_json()?;
    json.push('\n');
    out.write_bytes(format!("{}-feature-map.json", e.name), json.as_bytes())?;
    let rows: Vec<LossRow> = result
        .loss_history
        .iter()
        .enumerate()
        .map(|(step, &loss)| LossRow { step, loss })
        .collect();
    out.table(&format!("{}-loss", e.name), &rows)?;
    let mut checks = Vec::new();
    if e.check_decrease {
        checks.push(check(
            &e.name,
            "final loss below initial loss".into(),
            result.final_loss() < result.initial_loss(),
            format!("{:.6} -> {:.6}", result.initial_loss(), result.final_loss()),
        ));
    }
    Ok(checks)
}
