use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::config::{DatasetSource, ExperimentConfig, Method, TransferDirection};
use crate::backbone::{InputAdapter, ModelState};
use crate::dataset::{
    apply_split, generate_synthetic, load_dataset, make_validation_fold, DatasetIndex, Modality, NormStats,
    PreprocPolicy, SplitSpec,
};
use crate::diagnostics::{emit_results_table, LabeledResult, TableFormat};
use crate::error::{Error, Result};
use crate::evaluation::{aggregate_folds, evaluate_cross_modal, evaluate_single_modal, ProtocolSpec};
use crate::seed;
use crate::training::{
    embed_set, train_one_stream, train_step1, train_step2, train_zero_padding, CheckpointSink, ImageSet,
    Scenario, TrainConfig, TrainLog,
};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

pub const CONFIG_FILE: &str = "config.resolved.toml";
pub const STATE_FILE: &str = "state.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const FOLD_RESULTS_FILE: &str = "results.json";

/// The persisted per-run metrics document. Contains no timestamps, so equal
/// runs give byte-identical files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub schema_version: u32,
    pub experiment_id: String,
    pub method: Method,
    pub transfer_direction: Option<TransferDirection>,
    pub scenario: Option<Scenario>,
    pub n_folds: usize,
    pub protocol: ProtocolSpec,
    pub results: Vec<LabeledResult>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RunStatus {
    Running,
    Failed,
    Complete,
}

/// Resumption marker stored next to the fold outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub experiment_id: String,
    pub status: RunStatus,
    pub completed_folds: Vec<usize>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FoldRecord {
    fold: usize,
    results: Vec<LabeledResult>,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub dir: PathBuf,
    pub metrics: MetricsFile,
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Dataset, split and preprocessed images shared by every fold.
pub struct PreparedData {
    pub split: SplitSpec,
    pub design_index: DatasetIndex,
    pub design: ImageSet,
    pub test: ImageSet,
    pub policy: PreprocPolicy,
}

/// Synthetic data is generated from a seed derived from the master seed.
pub fn load_index(cfg: &ExperimentConfig) -> Result<DatasetIndex> {
    match cfg.dataset.source {
        DatasetSource::Synthetic => generate_synthetic(
            &cfg.dataset.synthetic,
            seed::derive_labeled(cfg.seed, "synthetic-data", &[]),
        ),
        DatasetSource::Directory => {
            let root = cfg
                .dataset
                .root
                .as_ref()
                .ok_or_else(|| Error::Config("dataset.root is required".into()))?;
            let layout = cfg
                .dataset
                .layout
                .ok_or_else(|| Error::Config("dataset.layout is required".into()))?;
            load_dataset(root, layout)
        }
    }
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let index = load_index(cfg)?;
    let split = cfg.dataset.split()?;
    let (design_index, test_index) = apply_split(&index, &split)?;
    let p = &cfg.preprocessing;
    let stats = if p.estimate_stats {
        NormStats::estimate(&design_index, p.margin)?
    } else {
        NormStats::default()
    };
    let policy = PreprocPolicy {
        margin: p.margin,
        stats,
        depth_encoding: p.depth_encoding,
    };
    Ok(PreparedData {
        design: ImageSet::from_index(&design_index, &policy)?,
        test: ImageSet::from_index(&test_index, &policy)?,
        split,
        design_index,
        policy,
    })
}

/// Train/validation images and sub-seeds of one fold.
pub struct FoldData {
    pub fold: usize,
    pub train: ImageSet,
    pub val: ImageSet,
    pub train_cfg: TrainConfig,
    pub protocol: ProtocolSpec,
}

pub fn fold_data(cfg: &ExperimentConfig, data: &PreparedData, fold: usize) -> Result<FoldData> {
    let (train_idx, val_idx) = make_validation_fold(
        &data.design_index,
        &data.split,
        fold,
        seed::derive_labeled(cfg.seed, "folds", &[]),
    )?;
    Ok(FoldData {
        fold,
        train: data.design.restrict(train_idx.identities()),
        val: data.design.restrict(val_idx.identities()),
        train_cfg: TrainConfig {
            seed: seed::derive_labeled(cfg.seed, "fold-train", &[fold as u64]),
            ..cfg.train.clone()
        },
        protocol: cfg
            .protocol
            .with_seed(seed::derive_labeled(cfg.seed, "fold-protocol", &[fold as u64])),
    })
}

fn fold_dir(cfg: &ExperimentConfig, fold: usize) -> PathBuf {
    cfg.run_dir().join(format!("fold{fold}"))
}

fn sink(cfg: &ExperimentConfig, fold: usize) -> CheckpointSink {
    CheckpointSink {
        dir: fold_dir(cfg, fold),
        experiment_id: cfg.experiment_id.clone(),
        fold,
    }
}

fn cross_rows(
    label: &str,
    rgb_model: &ModelState,
    depth_model: &ModelState,
    adapter: InputAdapter,
    test: &ImageSet,
    protocol: &ProtocolSpec,
) -> Result<Vec<LabeledResult>> {
    let rgb = embed_set(rgb_model, &test.of_modality(Modality::Rgb), adapter)?;
    let depth = embed_set(depth_model, &test.of_modality(Modality::Depth), adapter)?;
    Ok(evaluate_cross_modal(&rgb, &depth, protocol)?
        .into_iter()
        .map(|result| LabeledResult {
            label: label.to_string(),
            result,
        })
        .collect())
}

fn single_row(label: &str, model: &ModelState, set: &ImageSet, protocol: &ProtocolSpec) -> Result<LabeledResult> {
    let emb = embed_set(model, set, InputAdapter::Identity)?;
    Ok(LabeledResult {
        label: label.to_string(),
        result: evaluate_single_modal(&emb, protocol)?,
    })
}

/// Outcome of one fold: labelled results and the training logs by step.
pub struct FoldOutcome {
    pub results: Vec<LabeledResult>,
    pub logs: Vec<(String, TrainLog)>,
}

/// Step I of distillation on the teacher modality.
pub fn train_teacher(
    fd: &FoldData,
    cfg: &ExperimentConfig,
    direction: TransferDirection,
    sink: Option<&CheckpointSink>,
) -> Result<(ModelState, TrainLog)> {
    let t = direction.teacher();
    train_step1(&fd.train_cfg, &cfg.model, &fd.train.of_modality(t), &fd.val.of_modality(t), t, sink)
}

/// Step II from an already trained teacher, then evaluation on `test`.
pub fn distill_from_teacher(
    fd: &FoldData,
    teacher: &ModelState,
    direction: TransferDirection,
    scenario: Scenario,
    test: &ImageSet,
    sink: Option<&CheckpointSink>,
) -> Result<(Vec<LabeledResult>, TrainLog)> {
    let (t, s) = (direction.teacher(), direction.student());
    let (student, log) = train_step2(&fd.train_cfg, teacher, t, s, &fd.train, &fd.val, scenario, sink)?;
    let (rgb_model, depth_model) = match t {
        Modality::Depth => (&student, teacher),
        Modality::Rgb => (teacher, &student),
    };
    let mut rows = cross_rows(
        &format!("distill {direction}"),
        rgb_model,
        depth_model,
        InputAdapter::Identity,
        test,
        &fd.protocol,
    )?;
    rows.push(single_row(&format!("step1 {t}"), teacher, &test.of_modality(t), &fd.protocol)?);
    Ok((rows, log))
}

pub fn run_fold(cfg: &ExperimentConfig, data: &PreparedData, fold: usize) -> Result<FoldOutcome> {
    let fd = fold_data(cfg, data, fold)?;
    let sink = sink(cfg, fold);
    let sink = Some(&sink);
    let mut logs = Vec::new();
    let results = match cfg.method {
        Method::Distill => {
            let direction = cfg.transfer_direction.expect("validated");
            let (teacher, log1) = train_teacher(&fd, cfg, direction, sink)?;
            logs.push((format!("step1-{}", direction.teacher()), log1));
            let (rows, log2) = distill_from_teacher(&fd, &teacher, direction, cfg.scenario, &data.test, sink)?;
            logs.push((format!("step2-{direction}"), log2));
            rows
        }
        Method::OneStream => {
            let (m, log) = train_one_stream(&fd.train_cfg, &cfg.model, &fd.train, &fd.val, sink)?;
            logs.push(("one-stream".into(), log));
            cross_rows("one-stream", &m, &m, InputAdapter::Identity, &data.test, &fd.protocol)?
        }
        Method::ZeroPad => {
            let (m, log) = train_zero_padding(&fd.train_cfg, &cfg.model, &fd.train, &fd.val, sink)?;
            logs.push(("zero-pad".into(), log));
            let adapter = InputAdapter::ZeroPad(cfg.model.zero_pad);
            cross_rows("zero-pad", &m, &m, adapter, &data.test, &fd.protocol)?
        }
        Method::SingleModal => {
            let mut rows = Vec::new();
            for &m in &cfg.single_modalities {
                let (model, log) = train_step1(
                    &fd.train_cfg,
                    &cfg.model,
                    &fd.train.of_modality(m),
                    &fd.val.of_modality(m),
                    m,
                    sink,
                )?;
                logs.push((format!("step1-{m}"), log));
                rows.push(single_row(&format!("single-modal {m}"), &model, &data.test.of_modality(m), &fd.protocol)?);
            }
            rows
        }
    };
    Ok(FoldOutcome { results, logs })
}

fn read_state(cfg: &ExperimentConfig) -> Result<RunState> {
    let path = cfg.run_dir().join(STATE_FILE);
    if path.is_file() {
        read_json(&path)
    } else {
        Ok(RunState {
            experiment_id: cfg.experiment_id.clone(),
            status: RunStatus::Running,
            completed_folds: Vec::new(),
            error: None,
        })
    }
}

fn write_state(cfg: &ExperimentConfig, state: &RunState) -> Result<()> {
    write_json(&cfg.run_dir().join(STATE_FILE), state)
}

/// Creates the run directory and persists the resolved config. An existing
/// directory is reused only when it holds the same config.
pub fn init_run_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join(CONFIG_FILE);
    let text = cfg.to_toml();
    if path.is_file() {
        let old = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        if old != text {
            return Err(Error::Config(format!(
                "{} holds a different configuration; choose another experiment_id or remove it",
                dir.display()
            )));
        }
    } else {
        write_atomic(&path, text.as_bytes())?;
    }
    Ok(dir)
}

pub fn fold_done(cfg: &ExperimentConfig, fold: usize) -> bool {
    fold_dir(cfg, fold).join(FOLD_RESULTS_FILE).is_file()
}

/// Persists a finished fold and records it in the state marker.
pub fn persist_fold(cfg: &ExperimentConfig, fold: usize, outcome: &FoldOutcome) -> Result<()> {
    let dir = fold_dir(cfg, fold);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (step, log) in &outcome.logs {
        log.write_jsonl(&dir.join(format!("{step}.jsonl")))?;
    }
    write_json(
        &dir.join(FOLD_RESULTS_FILE),
        &FoldRecord {
            fold,
            results: outcome.results.clone(),
        },
    )?;
    let mut state = read_state(cfg)?;
    if !state.completed_folds.contains(&fold) {
        state.completed_folds.push(fold);
        state.completed_folds.sort_unstable();
    }
    state.status = RunStatus::Running;
    state.error = None;
    write_state(cfg, &state)
}

fn mark_failed(cfg: &ExperimentConfig, err: &Error) {
    if let Ok(mut state) = read_state(cfg) {
        state.status = RunStatus::Failed;
        state.error = Some(err.to_string());
        if let Err(e) = write_state(cfg, &state) {
            log::warn!("cannot record failure state: {e}");
        }
    }
}

/// Runs the listed folds that have no persisted results yet. Folds may be
/// split across processes and combined with [`aggregate`].
pub fn run_folds(cfg: &ExperimentConfig, folds: &[usize]) -> Result<()> {
    init_run_dir(cfg)?;
    if let Some(&f) = folds.iter().find(|&&f| f >= cfg.n_folds) {
        return Err(Error::Config(format!("fold {f} out of range 0..{}", cfg.n_folds)));
    }
    let pending: Vec<usize> = folds.iter().copied().filter(|&f| !fold_done(cfg, f)).collect();
    if pending.is_empty() {
        return Ok(());
    }
    let res = (|| {
        let data = prepare_data(cfg)?;
        for fold in pending {
            log::info!("{}: fold {fold}", cfg.experiment_id);
            let outcome = run_fold(cfg, &data, fold)?;
            persist_fold(cfg, fold, &outcome)?;
        }
        Ok(())
    })();
    if let Err(e) = &res {
        mark_failed(cfg, e);
    }
    res
}

/// Combines persisted fold results into the metrics file and tables.
pub fn aggregate(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let dir = cfg.run_dir();
    let missing: Vec<usize> = (0..cfg.n_folds).filter(|&f| !fold_done(cfg, f)).collect();
    if !missing.is_empty() {
        return Err(Error::Precondition(format!(
            "{}: folds {missing:?} have no results yet",
            dir.display()
        )));
    }
    let folds: Vec<FoldRecord> = (0..cfg.n_folds)
        .map(|f| read_json(&fold_dir(cfg, f).join(FOLD_RESULTS_FILE)))
        .collect::<Result<_>>()?;
    let mut results = Vec::new();
    for row in &folds[0].results {
        let per_fold: Vec<_> = folds
            .iter()
            .map(|fr| {
                fr.results
                    .iter()
                    .find(|r| r.label == row.label && r.result.direction == row.result.direction)
                    .map(|r| r.result.clone())
                    .ok_or_else(|| {
                        Error::Precondition(format!(
                            "fold {} lacks `{}` / {}",
                            fr.fold, row.label, row.result.direction
                        ))
                    })
            })
            .collect::<Result<_>>()?;
        let mut result = aggregate_folds(&per_fold)?;
        result.protocol = cfg.protocol.clone();
        results.push(LabeledResult {
            label: row.label.clone(),
            result,
        });
    }
    let metrics = MetricsFile {
        schema_version: METRICS_SCHEMA_VERSION,
        experiment_id: cfg.experiment_id.clone(),
        method: cfg.method,
        transfer_direction: (cfg.method == Method::Distill).then_some(cfg.transfer_direction).flatten(),
        scenario: (cfg.method == Method::Distill).then_some(cfg.scenario),
        n_folds: cfg.n_folds,
        protocol: cfg.protocol.clone(),
        results,
    };
    write_json(&dir.join(METRICS_FILE), &metrics)?;
    write_atomic(
        &dir.join("results.md"),
        emit_results_table(&metrics.results, TableFormat::Markdown).as_bytes(),
    )?;
    write_atomic(
        &dir.join("results.csv"),
        emit_results_table(&metrics.results, TableFormat::Csv).as_bytes(),
    )?;
    let mut state = read_state(cfg)?;
    state.status = RunStatus::Complete;
    state.error = None;
    write_state(cfg, &state)?;
    Ok(ExperimentReport { dir, metrics })
}

/// Runs every pending fold, then aggregates. Folds already persisted by an
/// interrupted run are reused.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let all: Vec<usize> = (0..cfg.n_folds).collect();
    run_folds(cfg, &all)?;
    aggregate(cfg)
}

/// Reads a persisted metrics file.
pub fn read_metrics(path: &Path) -> Result<MetricsFile> {
    let m: MetricsFile = read_json(path)?;
    if m.schema_version > METRICS_SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "{}: schema version {} is newer than supported {METRICS_SCHEMA_VERSION}",
            path.display(),
            m.schema_version
        )));
    }
    Ok(m)
}
