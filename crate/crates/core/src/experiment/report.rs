use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Method};
use super::run::{
    aggregate, distill_from_teacher, fold_data, fold_done, init_run_dir, prepare_data, persist_fold, read_json,
    read_metrics, run_experiment, train_teacher, write_atomic, write_json, FoldOutcome, MetricsFile, METRICS_FILE,
};
use crate::backbone::STAGES;
use crate::diagnostics::{emit_results_table, LabeledResult, TableFormat};
use crate::error::{Error, Result};
use crate::evaluation::Direction;
use crate::losses::LossKind;
use crate::training::{CheckpointSink, Scenario};

pub const SWEEP_FILE: &str = "sweep.json";
pub const ABLATION_FILE: &str = "ablation.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SweepAxis {
    EmbeddingSize,
    FreezeStage,
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "EMBEDDING_SIZE" => Ok(SweepAxis::EmbeddingSize),
            "FREEZE_STAGE" => Ok(SweepAxis::FreezeStage),
            _ => Err(Error::Config(format!(
                "sweep axis `{s}` is not one of EMBEDDING_SIZE, FREEZE_STAGE"
            ))),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::EmbeddingSize => "EMBEDDING_SIZE",
            SweepAxis::FreezeStage => "FREEZE_STAGE",
        })
    }
}

/// One sub-run of a sweep or ablation. `error` is set when the run failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub value: String,
    pub experiment_id: String,
    pub results: Vec<LabeledResult>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub experiment_id: String,
    pub axis: SweepAxis,
    pub rows: Vec<ReportRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub experiment_id: String,
    pub scenarios: Vec<Scenario>,
    pub rows: Vec<ReportRow>,
}

pub const CLASSIFICATION_LAYER: &str = "classification-layer";

fn sub_config(base: &ExperimentConfig, suffix: &str) -> ExperimentConfig {
    ExperimentConfig {
        experiment_id: format!("{}-{suffix}", base.experiment_id),
        output_dir: base.run_dir(),
        ..base.clone()
    }
}

/// Sub-run configs of a sweep, in launch order.
pub fn sweep_configs(base: &ExperimentConfig, axis: SweepAxis, values: &[String]) -> Result<Vec<(String, ExperimentConfig)>> {
    if values.is_empty() {
        return Err(Error::Config("a sweep needs at least one value".into()));
    }
    let mut out = Vec::new();
    match axis {
        SweepAxis::EmbeddingSize => {
            for v in values {
                let dim: usize = v
                    .trim()
                    .parse()
                    .ok()
                    .filter(|&d| d > 0)
                    .ok_or_else(|| Error::Config(format!("embedding size `{v}` is not a positive integer")))?;
                let mut cfg = sub_config(base, &format!("emb{dim}"));
                cfg.model.embedding_dim = dim;
                if cfg.train.loss_kind == LossKind::SoftmaxCls {
                    cfg.train.loss_kind = LossKind::SoftmaxPrelim;
                }
                out.push((dim.to_string(), cfg));
            }
            let mut cls = sub_config(base, "cls");
            cls.train.loss_kind = LossKind::SoftmaxCls;
            out.push((CLASSIFICATION_LAYER.to_string(), cls));
        }
        SweepAxis::FreezeStage => {
            if base.method != Method::Distill {
                return Err(Error::Config("a FREEZE_STAGE sweep needs method = DISTILL".into()));
            }
            for v in values {
                let stage = v.trim();
                if !STAGES.contains(&stage) {
                    return Err(Error::Config(format!("freeze stage `{v}` is not one of {STAGES:?}")));
                }
                let mut cfg = sub_config(base, &format!("freeze-{stage}"));
                cfg.train.freeze_stage = stage.to_string();
                out.push((stage.to_string(), cfg));
            }
        }
    }
    for (_, cfg) in &out {
        cfg.validate()?;
    }
    Ok(out)
}

fn relabel(results: &[LabeledResult], label: &str, cross_only: bool) -> Vec<LabeledResult> {
    results
        .iter()
        .filter(|r| !cross_only || r.result.direction != Direction::SingleModal)
        .map(|r| LabeledResult {
            label: label.to_string(),
            result: r.result.clone(),
        })
        .collect()
}

fn rows_table(rows: &[ReportRow], cross_only: bool) -> Vec<LabeledResult> {
    rows.iter().flat_map(|r| relabel(&r.results, &r.value, cross_only)).collect()
}

fn write_tables(dir: &Path, stem: &str, rows: &[LabeledResult]) -> Result<()> {
    write_atomic(
        &dir.join(format!("{stem}.md")),
        emit_results_table(rows, TableFormat::Markdown).as_bytes(),
    )?;
    write_atomic(
        &dir.join(format!("{stem}.csv")),
        emit_results_table(rows, TableFormat::Csv).as_bytes(),
    )
}

/// One run per value with shared seeds. An EMBEDDING_SIZE sweep adds the
/// classification-layer embedding as a last run. Failed runs are recorded and
/// the sweep continues.
pub fn run_sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[String]) -> Result<SweepReport> {
    base.validate()?;
    let subs = sweep_configs(base, axis, values)?;
    let mut rows = Vec::with_capacity(subs.len());
    for (value, cfg) in subs {
        log::info!("sweep {axis} = {value}");
        let row = match run_experiment(&cfg) {
            Ok(rep) => ReportRow {
                value,
                experiment_id: cfg.experiment_id,
                results: rep.metrics.results,
                error: None,
            },
            Err(e) => {
                log::warn!("sweep {axis} = {value} failed: {e}");
                ReportRow {
                    value,
                    experiment_id: cfg.experiment_id,
                    results: Vec::new(),
                    error: Some(e.to_string()),
                }
            }
        };
        rows.push(row);
    }
    let report = SweepReport {
        experiment_id: base.experiment_id.clone(),
        axis,
        rows,
    };
    let dir = base.run_dir();
    write_json(&dir.join(SWEEP_FILE), &report)?;
    write_tables(&dir, "sweep", &rows_table(&report.rows, false))?;
    Ok(report)
}

/// Scenario order of the ablation report.
pub const ABLATION_SCENARIOS: [Scenario; 3] = [Scenario::NEITHER, Scenario::COPY_ONLY, Scenario::COPY_FREEZE];

fn scenario_config(base: &ExperimentConfig, s: Scenario) -> ExperimentConfig {
    let mut cfg = sub_config(base, &s.label().replace('+', "-"));
    cfg.scenario = s;
    cfg
}

/// Distillation under each initialisation scenario. Per fold, one teacher is
/// trained and shared by the three students.
pub fn run_ablation(base: &ExperimentConfig) -> Result<AblationReport> {
    base.validate()?;
    if base.method != Method::Distill {
        return Err(Error::Config("ablation needs method = DISTILL".into()));
    }
    let direction = base.transfer_direction.expect("validated");
    let subs: Vec<ExperimentConfig> = ABLATION_SCENARIOS.iter().map(|&s| scenario_config(base, s)).collect();
    for cfg in &subs {
        init_run_dir(cfg)?;
    }
    let mut errors: Vec<Option<String>> = vec![None; subs.len()];
    let pending: Vec<usize> = (0..base.n_folds)
        .filter(|&f| subs.iter().any(|c| !fold_done(c, f)))
        .collect();
    if !pending.is_empty() {
        let data = prepare_data(base)?;
        for fold in pending {
            let fd = fold_data(base, &data, fold)?;
            let teacher_sink = CheckpointSink {
                dir: base.run_dir().join(format!("fold{fold}")),
                experiment_id: base.experiment_id.clone(),
                fold,
            };
            let (teacher, tlog) = match train_teacher(&fd, base, direction, Some(&teacher_sink)) {
                Ok(t) => t,
                Err(e) => {
                    log::warn!("ablation fold {fold}: teacher failed: {e}");
                    for err in errors.iter_mut() {
                        err.get_or_insert_with(|| e.to_string());
                    }
                    continue;
                }
            };
            for (i, cfg) in subs.iter().enumerate() {
                if fold_done(cfg, fold) || errors[i].is_some() {
                    continue;
                }
                let sink = CheckpointSink {
                    dir: cfg.run_dir().join(format!("fold{fold}")),
                    experiment_id: cfg.experiment_id.clone(),
                    fold,
                };
                let res = distill_from_teacher(&fd, &teacher, direction, cfg.scenario, &data.test, Some(&sink))
                    .and_then(|(results, log2)| {
                        let outcome = FoldOutcome {
                            results,
                            logs: vec![
                                (format!("step1-{}", direction.teacher()), tlog.clone()),
                                (format!("step2-{direction}"), log2),
                            ],
                        };
                        persist_fold(cfg, fold, &outcome)
                    });
                if let Err(e) = res {
                    log::warn!("ablation {} fold {fold} failed: {e}", cfg.scenario.label());
                    errors[i] = Some(e.to_string());
                }
            }
        }
    }
    let rows = subs
        .iter()
        .zip(errors)
        .map(|(cfg, err)| {
            let value = cfg.scenario.label().to_string();
            let agg = match err {
                Some(e) => Err(e),
                None => aggregate(cfg).map_err(|e| e.to_string()),
            };
            match agg {
                Ok(rep) => ReportRow {
                    value: value.clone(),
                    experiment_id: cfg.experiment_id.clone(),
                    results: relabel(&rep.metrics.results, &value, true),
                    error: None,
                },
                Err(e) => ReportRow {
                    value,
                    experiment_id: cfg.experiment_id.clone(),
                    results: Vec::new(),
                    error: Some(e),
                },
            }
        })
        .collect();
    let report = AblationReport {
        experiment_id: base.experiment_id.clone(),
        scenarios: ABLATION_SCENARIOS.to_vec(),
        rows,
    };
    let dir = base.run_dir();
    write_json(&dir.join(ABLATION_FILE), &report)?;
    write_tables(&dir, "ablation", &rows_table(&report.rows, true))?;
    Ok(report)
}

/// mAP per sweep value, one series per direction, in row order. Failed rows
/// are left out.
pub fn sweep_series(report: &SweepReport) -> BTreeMap<Direction, Vec<(String, f64)>> {
    let mut out: BTreeMap<Direction, Vec<(String, f64)>> = BTreeMap::new();
    for row in &report.rows {
        let mut seen = Vec::new();
        for r in &row.results {
            let d = r.result.direction;
            if !seen.contains(&d) {
                seen.push(d);
                out.entry(d).or_default().push((row.value.clone(), r.result.mean.map));
            }
        }
    }
    out
}

fn plot_error(path: &Path, e: impl fmt::Display) -> Error {
    Error::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

const PLOT_SIZE: (u32, u32) = (720, 480);

fn plot_cmc(metrics: &MetricsFile, path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, PLOT_SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_error(path, e))?;
    let k = metrics.results.iter().map(|r| r.result.cmc.len()).max().unwrap_or(1).max(1);
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("CMC: {}", metrics.experiment_id), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(1f64..k as f64, 0f64..1f64)
        .map_err(|e| plot_error(path, e))?;
    chart
        .configure_mesh()
        .x_desc("rank")
        .y_desc("matching rate")
        .draw()
        .map_err(|e| plot_error(path, e))?;
    for (i, r) in metrics.results.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let pts: Vec<(f64, f64)> = r.result.cmc.iter().enumerate().map(|(j, &v)| ((j + 1) as f64, v)).collect();
        chart
            .draw_series(LineSeries::new(pts, color.stroke_width(2)))
            .map_err(|e| plot_error(path, e))?
            .label(format!("{} {}", r.label, r.result.direction))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(|e| plot_error(path, e))?;
    root.present().map_err(|e| plot_error(path, e))
}

fn plot_sweep(report: &SweepReport, path: &Path) -> Result<()> {
    let series = sweep_series(report);
    let names: Vec<String> = report.rows.iter().map(|r| r.value.clone()).collect();
    let n = names.len().max(1);
    let root = SVGBackend::new(path, PLOT_SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_error(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{} sweep: {}", report.axis, report.experiment_id), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(44)
        .build_cartesian_2d(-0.5f64..n as f64 - 0.5, 0f64..1f64)
        .map_err(|e| plot_error(path, e))?;
    let label_of = |x: &f64| {
        let i = x.round();
        if (x - i).abs() < 1e-6 && i >= 0.0 {
            names.get(i as usize).cloned().unwrap_or_default()
        } else {
            String::new()
        }
    };
    chart
        .configure_mesh()
        .x_labels(n)
        .x_label_formatter(&label_of)
        .x_desc(report.axis.to_string())
        .y_desc("mAP")
        .draw()
        .map_err(|e| plot_error(path, e))?;
    for (i, (dir, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let xy: Vec<(f64, f64)> = pts
            .iter()
            .filter_map(|(v, m)| names.iter().position(|nm| nm == v).map(|x| (x as f64, *m)))
            .collect();
        chart
            .draw_series(LineSeries::new(xy.clone(), color.stroke_width(2)))
            .map_err(|e| plot_error(path, e))?
            .label(dir.label())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        chart
            .draw_series(xy.into_iter().map(|p| Circle::new(p, 4, color.filled())))
            .map_err(|e| plot_error(path, e))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_error(path, e))?;
    root.present().map_err(|e| plot_error(path, e))
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Writes `cmc.svg` next to every metrics file and `sweep_map.svg` next to
/// every sweep report under `dir`. Unreadable files are skipped with a
/// warning. Returns the written paths in sorted order.
pub fn emit_plots(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    walk(dir, &mut files)?;
    let mut written = Vec::new();
    for f in files {
        let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let parent = f.parent().unwrap_or(dir);
        if name == METRICS_FILE {
            match read_metrics(&f) {
                Ok(m) => {
                    let out = parent.join("cmc.svg");
                    plot_cmc(&m, &out)?;
                    written.push(out);
                }
                Err(e) => log::warn!("skipping {}: {e}", f.display()),
            }
        } else if name == SWEEP_FILE {
            match read_json::<SweepReport>(&f) {
                Ok(r) => {
                    let out = parent.join("sweep_map.svg");
                    plot_sweep(&r, &out)?;
                    written.push(out);
                }
                Err(e) => log::warn!("skipping {}: {e}", f.display()),
            }
        }
    }
    Ok(written)
}
