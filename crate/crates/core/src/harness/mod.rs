//! Synthetic needle-in-a-haystack recall experiments and the suite runner.

mod niah;
mod recall;
mod suite;

pub use niah::{decode_nearest, gen_niah, KeyDistribution, NiahInstance, SyntheticTaskSpec};
pub use recall::{
    eval_recall, eval_recall_with, ordering_violations, run_ablation, trial_seed, write_records_csv, ExperimentConfig,
    FeatureMapSource, Policy, ResultRecord, ABLATION_ORDER, RECORD_COLUMNS, WINDOW_EXTENSION,
};
pub use suite::{
    collision_policies, collision_stream, difference_lower_bound, run_in_dir, run_suite, sha256_hex,
    AblationExperiment, CheckResult, CollisionExperiment, CollisionSummary, DistillExperiment, Dominance, Experiment,
    ExperimentError, ExperimentOutcome, FileEntry, FloorRow, GramCell, GramExperiment, GramRow, LossRow, Manifest,
    OutputFormat, RecallCheck, RecallExperiment, RecallRun, SuiteConfig, SuiteReport, TaskConfig, MANIFEST_FILE,
    Z_95_ONE_SIDED,
};
