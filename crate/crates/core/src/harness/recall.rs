//! Recall evaluation of a memory policy on synthetic haystacks.

use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::niah::{decode_nearest, gen_niah, NiahInstance, SyntheticTaskSpec};
use crate::attention::{distill_feature_map, AttentionConfig, FeatureMapParams, KVPair, LinearState, TeacherSequence};
use crate::cache::{CacheConfig, LoLAState};
use crate::chunkwise::{effective_cache_size, prefill, ChunkConfig};
use crate::error::{Error, Result};
use crate::numerics::SeededRng;
use crate::scoring::{self_recall_score, Scorer};

/// Stream id reserved for feature-map distillation data; trial streams
/// count up from 1.
const DISTILL_STREAM: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Policy {
    /// Everything goes to the hidden state.
    LinearOnly,
    /// Sliding window over the hidden state, no sparse cache.
    WindowOnly,
    /// Sliding window, self-recall scored sparse cache, hidden state.
    Lola,
    /// As [`Policy::Lola`] with a query-based eviction score.
    LolaAltScore(Scorer),
}

impl Policy {
    pub fn scorer(self) -> Scorer {
        match self {
            Policy::LolaAltScore(s) => s,
            _ => Scorer::SelfRecall,
        }
    }

    /// Window and sparse capacities this policy actually uses.
    pub fn cache_config(self, window: usize, sparse: usize) -> CacheConfig {
        match self {
            Policy::LinearOnly => CacheConfig::new(0, 0),
            Policy::WindowOnly => CacheConfig::new(window, 0),
            Policy::Lola | Policy::LolaAltScore(_) => CacheConfig::new(window, sparse),
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::LinearOnly => f.write_str("linear-only"),
            Policy::WindowOnly => f.write_str("window-only"),
            Policy::Lola => f.write_str("lola"),
            Policy::LolaAltScore(s) => write!(f, "lola-altscore:{s}"),
        }
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear-only" => Ok(Policy::LinearOnly),
            "window-only" => Ok(Policy::WindowOnly),
            "lola" => Ok(Policy::Lola),
            other => match other.strip_prefix("lola-altscore:") {
                Some(name) => Ok(Policy::LolaAltScore(name.parse()?)),
                None => Err(Error::InvalidConfig(format!(
                    "unknown policy {other:?}; expected linear-only, window-only, lola or lola-altscore:<score>"
                ))),
            },
        }
    }
}

impl TryFrom<String> for Policy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Policy> for String {
    fn from(p: Policy) -> String {
        p.to_string()
    }
}

/// Where the feature map comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FeatureMapSource {
    /// Untrained weights drawn from `seed`.
    Random { seed: u64 },
    /// Weights saved as feature-map JSON.
    File { path: PathBuf },
    /// Distilled against softmax attention on haystacks drawn from the task
    /// distribution.
    Distilled {
        #[serde(default = "default_distill_steps")]
        steps: usize,
        #[serde(default = "default_distill_sequences")]
        sequences: usize,
        #[serde(default = "default_distill_length")]
        length: usize,
        #[serde(default = "default_distill_lr")]
        learning_rate: f64,
    },
}

fn default_distill_steps() -> usize {
    60
}

fn default_distill_sequences() -> usize {
    8
}

fn default_distill_length() -> usize {
    48
}

fn default_distill_lr() -> f64 {
    0.05
}

impl Default for FeatureMapSource {
    fn default() -> Self {
        FeatureMapSource::Distilled {
            steps: default_distill_steps(),
            sequences: default_distill_sequences(),
            length: default_distill_length(),
            learning_rate: default_distill_lr(),
        }
    }
}

impl FeatureMapSource {
    pub fn label(&self) -> String {
        match self {
            FeatureMapSource::Random { seed } => format!("random:{seed}"),
            FeatureMapSource::File { path } => format!("file:{}", path.display()),
            FeatureMapSource::Distilled { steps, .. } => format!("distilled:{steps}"),
        }
    }

    /// Builds the map for `spec`. Distillation data is drawn from a stream of
    /// `spec.seed` that trials never use.
    pub fn resolve(&self, spec: &SyntheticTaskSpec, attention: &AttentionConfig) -> Result<FeatureMapParams> {
        let params = match self {
            FeatureMapSource::Random { seed } => FeatureMapParams::init(&mut SeededRng::new(*seed), attention)?,
            FeatureMapSource::File { path } => FeatureMapParams::load(path)?,
            FeatureMapSource::Distilled {
                steps,
                sequences,
                length,
                learning_rate,
            } => {
                let mut rng = SeededRng::child(spec.seed, DISTILL_STREAM);
                let corpus = (0..*sequences)
                    .map(|_| {
                        let mut s = spec.clone().with_seed(rng.next_u64());
                        s.haystack_len = *length;
                        s.needle_count = s.needle_count.min(*length);
                        let inst = gen_niah(&s)?;
                        TeacherSequence::new(inst.queries.clone(), inst.keys(), inst.values(), attention.scale)
                    })
                    .collect::<Result<Vec<_>>>()?;
                distill_feature_map(&mut rng, attention, &corpus, *steps, *learning_rate)?.params
            }
        };
        params.check_config(attention)?;
        Ok(params)
    }
}

/// One recall experiment: a policy, its budgets, and how many trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub policy: Policy,
    /// Sliding window size `η`.
    #[serde(default)]
    pub window: usize,
    /// Sparse cache size `λ`.
    #[serde(default)]
    pub sparse: usize,
    /// Chunk size `C`; when set, the stream is consumed by chunked prefill.
    #[serde(default)]
    pub chunk: Option<usize>,
    pub trials: usize,
    /// Feature dimension `D`; `2d` when unset.
    #[serde(default)]
    pub feature_dim: Option<usize>,
    #[serde(default)]
    pub feature_map: FeatureMapSource,
}

impl ExperimentConfig {
    pub fn new(policy: Policy, window: usize, sparse: usize, trials: usize) -> Self {
        Self {
            policy,
            window,
            sparse,
            chunk: None,
            trials,
            feature_dim: None,
            feature_map: FeatureMapSource::default(),
        }
    }

    pub fn with_chunk(mut self, chunk: usize) -> Self {
        self.chunk = Some(chunk);
        self
    }

    pub fn with_feature_map(mut self, source: FeatureMapSource) -> Self {
        self.feature_map = source;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be at least 1".into()));
        }
        if let Some(c) = self.chunk {
            if c == 0 {
                return Err(Error::InvalidConfig("chunk size must be at least 1".into()));
            }
            match self.policy {
                Policy::Lola | Policy::WindowOnly => {}
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "policy {other} has no chunked prefill path"
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn attention(&self, spec: &SyntheticTaskSpec) -> Result<AttentionConfig> {
        match self.feature_dim {
            Some(f) => AttentionConfig::with_feature_dim(spec.d, f),
            None => AttentionConfig::new(spec.d),
        }
    }

    fn chunk_config(&self) -> Option<ChunkConfig> {
        self.chunk.map(|chunk| ChunkConfig {
            chunk,
            sparse: self.cache_config().sparse,
        })
    }

    pub fn cache_config(&self) -> CacheConfig {
        self.policy.cache_config(self.window, self.sparse)
    }

    /// Full-rank pairs the policy may hold.
    pub fn effective_cache_size(&self) -> usize {
        match self.chunk_config() {
            Some(c) => effective_cache_size(&c),
            None => self.cache_config().full_rank_budget(),
        }
    }
}

/// Outcome of one recall experiment. Columns are emitted in field order;
/// wall time is kept out of emitted files so artifacts stay reproducible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub label: String,
    pub policy: Policy,
    pub scorer: Scorer,
    pub window: usize,
    pub sparse: usize,
    pub chunk: Option<usize>,
    pub n: usize,
    pub d: usize,
    pub feature_dim: usize,
    pub key_distribution: String,
    pub key_scale: f64,
    pub codebook: usize,
    pub needles: usize,
    pub feature_map: String,
    pub seed: u64,
    pub trials: usize,
    pub matches: usize,
    pub accuracy: f64,
    pub mean_self_recall_error: f64,
    pub effective_cache_size: usize,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

struct TrialOutcome {
    hit: bool,
    self_recall_error: f64,
}

/// Seed of trial `trial` (0-based) under base seed `seed`.
pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    SeededRng::child(seed, trial as u64 + 1).next_u64()
}

/// Evaluates `config` on `config.trials` haystacks drawn from `spec`.
pub fn eval_recall(config: &ExperimentConfig, spec: &SyntheticTaskSpec) -> Result<ResultRecord> {
    config.validate()?;
    spec.validate()?;
    let attention = config.attention(spec)?;
    let params = config.feature_map.resolve(spec, &attention)?;
    eval_recall_with(config, spec, &params)
}

/// [`eval_recall`] with an already built feature map.
pub fn eval_recall_with(
    config: &ExperimentConfig,
    spec: &SyntheticTaskSpec,
    params: &FeatureMapParams,
) -> Result<ResultRecord> {
    config.validate()?;
    spec.validate()?;
    let attention = config.attention(spec)?;
    params.check_config(&attention)?;
    let start = Instant::now();
    let outcomes = (0..config.trials)
        .into_par_iter()
        .map(|t| {
            let inst = gen_niah(&spec.clone().with_seed(trial_seed(spec.seed, t)))?;
            run_trial(config, &attention, params, &inst)
        })
        .collect::<Result<Vec<_>>>()?;
    let matches = outcomes.iter().filter(|o| o.hit).count();
    let mean_err = outcomes.iter().map(|o| o.self_recall_error).sum::<f64>() / outcomes.len() as f64;
    let cache = config.cache_config();
    Ok(ResultRecord {
        label: config.policy.to_string(),
        policy: config.policy,
        scorer: config.policy.scorer(),
        window: cache.window,
        sparse: cache.sparse,
        chunk: config.chunk,
        n: spec.haystack_len,
        d: spec.d,
        feature_dim: attention.feature_dim,
        key_distribution: spec.key_distribution.name().to_string(),
        key_scale: spec.key_scale,
        codebook: spec.value_codebook_size,
        needles: spec.needle_count,
        feature_map: config.feature_map.label(),
        seed: spec.seed,
        trials: config.trials,
        matches,
        accuracy: matches as f64 / config.trials as f64,
        mean_self_recall_error: mean_err,
        effective_cache_size: config.effective_cache_size(),
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

fn run_trial(
    config: &ExperimentConfig,
    attention: &AttentionConfig,
    params: &FeatureMapParams,
    inst: &NiahInstance,
) -> Result<TrialOutcome> {
    let budget = config.effective_cache_size();
    let (output, linear, full_rank): (_, LinearState, Vec<usize>) = match config.chunk_config() {
        Some(chunk) => {
            let keys = inst.keys();
            let values = inst.values();
            let (_, state) = prefill(&inst.queries, &keys, &values, chunk, *attention, params.clone())?;
            if state.peak_full_rank() > budget {
                return Err(Error::BudgetExceeded(format!(
                    "prefill held {} full-rank pairs against {budget}",
                    state.peak_full_rank()
                )));
            }
            let held = state
                .lookback()
                .map(|p| p.index)
                .chain(state.sparse().entries().iter().map(|e| e.pair.index))
                .collect();
            (state.attend(&inst.probe)?, state.linear().clone(), held)
        }
        None => {
            let mut state = LoLAState::new(
                *attention,
                params.clone(),
                config.cache_config(),
                config.policy.scorer(),
            )?;
            for (q, p) in inst.queries.iter().zip(&inst.pairs) {
                state.ingest(q, p.key.clone(), p.value.clone())?;
                let held = state.window().len() + state.sparse().len();
                if held > budget || !state.conservation_holds() {
                    return Err(Error::BudgetExceeded(format!(
                        "decode held {held} full-rank pairs against {budget} at t={}",
                        state.time()
                    )));
                }
            }
            let held = state
                .window()
                .pairs()
                .map(|p| p.index)
                .chain(state.sparse().entries().iter().map(|e| e.pair.index))
                .collect();
            (state.attend(&inst.probe)?, state.linear().clone(), held)
        }
    };
    let hit = decode_nearest(&output, &inst.codebook)? == inst.target_value_id;
    Ok(TrialOutcome {
        hit,
        self_recall_error: mean_absorbed_error(params, &inst.pairs, &full_rank, &linear)?,
    })
}

/// Mean self-recall error, against `linear`, of every pair not held in full
/// rank. Zero when nothing was absorbed.
fn mean_absorbed_error(
    params: &FeatureMapParams,
    pairs: &[KVPair],
    full_rank: &[usize],
    linear: &LinearState,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in pairs.iter().filter(|p| !full_rank.contains(&p.index)) {
        sum += self_recall_score(params, &p.key, &p.value, linear)?;
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Writes records as CSV with a header row.
pub fn write_records_csv<W: Write>(records: &[ResultRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    if records.is_empty() {
        w.write_record(RECORD_COLUMNS)?;
    }
    w.flush()?;
    Ok(())
}

/// Column order of [`write_records_csv`].
pub const RECORD_COLUMNS: &[&str] = &[
    "label",
    "policy",
    "scorer",
    "window",
    "sparse",
    "chunk",
    "n",
    "d",
    "feature_dim",
    "key_distribution",
    "key_scale",
    "codebook",
    "needles",
    "feature_map",
    "seed",
    "trials",
    "matches",
    "accuracy",
    "mean_self_recall_error",
    "effective_cache_size",
];

/// Label of the window-extension baseline row in an ablation.
pub const WINDOW_EXTENSION: &str = "window-extension";

/// Scoring ablation at a fixed full-rank budget: one row per strategy with
/// `window` + `sparse`, and a window-only row whose window takes the whole
/// budget. Self-recall is always included and comes first; the baseline
/// comes last.
pub fn run_ablation(
    spec: &SyntheticTaskSpec,
    strategies: &[Scorer],
    window: usize,
    sparse: usize,
    trials: usize,
    feature_map: &FeatureMapSource,
) -> Result<Vec<ResultRecord>> {
    if strategies.is_empty() {
        return Err(Error::EmptyInput("ablation strategies"));
    }
    let mut order = vec![Scorer::SelfRecall];
    for &s in strategies {
        if !order.contains(&s) {
            order.push(s);
        }
    }
    let base = ExperimentConfig::new(Policy::Lola, window, sparse, trials).with_feature_map(feature_map.clone());
    let attention = base.attention(spec)?;
    let params = feature_map.resolve(spec, &attention)?;
    let mut records = Vec::with_capacity(order.len() + 1);
    for s in order {
        let policy = match s {
            Scorer::SelfRecall => Policy::Lola,
            other => Policy::LolaAltScore(other),
        };
        let mut r = eval_recall_with(&ExperimentConfig { policy, ..base.clone() }, spec, &params)?;
        r.label = s.name().to_string();
        records.push(r);
    }
    let baseline = ExperimentConfig {
        policy: Policy::WindowOnly,
        window: window + sparse,
        sparse: 0,
        ..base
    };
    let mut r = eval_recall_with(&baseline, spec, &params)?;
    r.label = WINDOW_EXTENSION.to_string();
    records.push(r);
    Ok(records)
}

/// Expected accuracy ranking of ablation rows, best first.
pub const ABLATION_ORDER: [&str; 5] = [
    "self-recall",
    "overestimate",
    WINDOW_EXTENSION,
    "attn-err-abs",
    "attn-err-sq",
];

/// Pairs `(a, b)` of labels where `a` ranks above `b` in `expected`, at
/// least `slack + 1` places apart, yet has strictly lower accuracy. Adjacent
/// rows within `slack` places may swap. Labels missing from `records` are
/// skipped.
pub fn ordering_violations(records: &[ResultRecord], expected: &[&str], slack: usize) -> Vec<(String, String)> {
    let acc = |label: &str| records.iter().find(|r| r.label == label).map(|r| r.accuracy);
    let mut out = Vec::new();
    for (i, a) in expected.iter().enumerate() {
        for b in expected.iter().skip(i + slack + 1) {
            if let (Some(x), Some(y)) = (acc(a), acc(b)) {
                if x < y {
                    out.push((a.to_string(), b.to_string()));
                }
            }
        }
    }
    out
}
