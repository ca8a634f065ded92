//! Experiment orchestration: run configs, the training loop and suites.

mod config;
mod suite;
mod train;

pub use config::{
    data_seed, default_run_seed, DeskPreset, DESK_LR, Mode, ModelSpec, Regime, RunConfig, SurrogateConfig,
};
pub use suite::{
    read_records, run_suite, suite_pretrain, write_records, SuiteConfig, SuiteOutcome, RECORDS_FILE,
    SURROGATE_FILE,
};
pub use train::{
    a_overlap, evaluate, mlp_examples, run_experiment, run_on, surrogate_mapping, surrogate_pretrain,
    task_instances, EpochLog, Pretrained, RunOptions, RunRecord, SurrogateReport, SCHEMA_VERSION,
};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "DIRLAB_OUT";

pub fn default_out_dir() -> std::path::PathBuf {
    std::env::var_os(OUT_ENV)
        .map(Into::into)
        .unwrap_or_else(|| "runs".into())
}
