//! Configuration-driven experiment runner.
//!
//! A run directory `<output_dir>/<experiment_id>` holds:
//!
//! ```text
//! config.resolved.toml   effective configuration
//! state.json             completed folds and run status
//! fold<f>/results.json   per-fold evaluation results
//! fold<f>/<step>.jsonl   training logs
//! fold<f>/*.ckpt         best checkpoint of every training step
//! metrics.json           fold aggregate (schema-versioned)
//! results.md, results.csv
//! ```

mod config;
mod report;
mod run;

pub use config::{
    DatasetConfig, DatasetSource, ExperimentConfig, Method, PreprocessingConfig, TransferDirection,
};
pub use report::{
    emit_plots, run_ablation, run_sweep, sweep_configs, sweep_series, AblationReport, ReportRow, SweepAxis,
    SweepReport, ABLATION_FILE, ABLATION_SCENARIOS, CLASSIFICATION_LAYER, SWEEP_FILE,
};
pub use run::{
    aggregate, distill_from_teacher, fold_data, fold_done, init_run_dir, load_index, persist_fold, prepare_data,
    read_metrics, run_experiment, run_fold, run_folds, train_teacher, ExperimentReport, FoldData, FoldOutcome,
    MetricsFile, PreparedData, RunState, RunStatus, CONFIG_FILE, FOLD_RESULTS_FILE, METRICS_FILE,
    METRICS_SCHEMA_VERSION, STATE_FILE,
};

#[cfg(test)]
mod tests;
