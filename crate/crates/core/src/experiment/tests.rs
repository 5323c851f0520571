use std::fs;
use std::path::Path;

use super::*;
use crate::dataset::SynthSpec;
use crate::evaluation::Direction;
use crate::losses::LossKind;

fn tiny_cfg(dir: &Path, id: &str) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        experiment_id: id.into(),
        output_dir: dir.to_path_buf(),
        n_folds: 2,
        ..ExperimentConfig::default()
    };
    c.dataset.synthetic = SynthSpec {
        n_identities: 8,
        images_per_identity: 8,
        ..SynthSpec::default()
    };
    c.dataset.n_test = 3;
    c.dataset.n_val = Some(1);
    c.train.max_epochs = 1;
    c.train.batch_size = 16;
    c.train.val_repetitions = 1;
    c.model.embedding_dim = 16;
    c.protocol.gallery_repetitions = 2;
    c
}

#[test]
fn toml_defaults_and_overrides() {
    let text = r#"
experiment_id = "smoke"
method = "DISTILL"
transfer_direction = "RGB_TO_DEPTH"

[train]
max_epochs = 3
"#;
    let cfg = ExperimentConfig::from_toml(text, &["model.embedding_dim=32".into(), "seed=7".into()]).unwrap();
    assert_eq!(cfg.transfer_direction, Some(TransferDirection::RgbToDepth));
    assert_eq!(cfg.train.max_epochs, 3);
    assert_eq!(cfg.model.embedding_dim, 32);
    assert_eq!(cfg.seed, 7);
    assert_eq!(cfg.n_folds, 3);
    assert_eq!(cfg.protocol.gallery_repetitions, 10);
    let back = ExperimentConfig::from_toml(&cfg.to_toml(), &[]).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn invalid_method_names_the_field() {
    let err = ExperimentConfig::from_toml("method = \"DISTIL\"\n", &[]).unwrap_err().to_string();
    assert!(err.contains("method"), "{err}");
    let err = ExperimentConfig::from_toml("", &["method=FOO".into()]).unwrap_err().to_string();
    assert!(err.contains("method"), "{err}");
    let err = ExperimentConfig::from_toml("[train]\nmax_epoch = 3\n", &[]).unwrap_err().to_string();
    assert!(err.contains("max_epoch"), "{err}");
}

#[test]
fn every_problem_is_listed() {
    let mut cfg = ExperimentConfig {
        n_folds: 0,
        transfer_direction: None,
        experiment_id: "a b".into(),
        ..ExperimentConfig::default()
    };
    cfg.train.max_epochs = 0;
    cfg.dataset.n_test = 100;
    let problems = cfg.problems();
    assert_eq!(problems.len(), 5, "{problems:?}");
    let msg = cfg.validate().unwrap_err().to_string();
    for p in &problems {
        assert!(msg.contains(p.as_str()));
    }
}

#[test]
fn method_parses_case_insensitively() {
    assert_eq!("one-stream".parse::<Method>().unwrap(), Method::OneStream);
    assert!("dist".parse::<Method>().is_err());
}

#[test]
fn distill_run_persists_both_directions_and_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_experiment(&tiny_cfg(a.path(), "smoke")).unwrap();
    let dirs: Vec<Direction> = ra.metrics.results.iter().map(|r| r.result.direction).collect();
    assert_eq!(dirs, [Direction::QRgbGDepth, Direction::QDepthGRgb, Direction::SingleModal]);
    assert_eq!(ra.metrics.results[0].label, "distill depth-to-rgb");
    assert!(ra.metrics.results.iter().all(|r| r.result.per_fold.len() == 2));
    for f in [CONFIG_FILE, STATE_FILE, METRICS_FILE, "results.md", "results.csv", "fold0/results.json"] {
        assert!(ra.dir.join(f).is_file(), "{f}");
    }
    let state: RunState = serde_json::from_str(&fs::read_to_string(ra.dir.join(STATE_FILE)).unwrap()).unwrap();
    assert_eq!(state.status, RunStatus::Complete);
    assert_eq!(state.completed_folds, [0, 1]);
    let ckpts = fs::read_dir(ra.dir.join("fold0"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ckpt"))
        .count();
    assert_eq!(ckpts, 2);

    run_experiment(&tiny_cfg(b.path(), "smoke")).unwrap();
    let read = |d: &Path| fs::read(d.join("smoke").join(METRICS_FILE)).unwrap();
    assert_eq!(read(a.path()), read(b.path()));

    let m = read_metrics(&ra.dir.join(METRICS_FILE)).unwrap();
    assert_eq!(m.protocol.gallery_repetitions, 2);
    assert_eq!(m.schema_version, METRICS_SCHEMA_VERSION);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut cfg = tiny_cfg(a.path(), "resume");
    cfg.method = Method::OneStream;
    run_folds(&cfg, &[0]).unwrap();
    assert!(fold_done(&cfg, 0) && !fold_done(&cfg, 1));
    assert!(aggregate(&cfg).is_err());
    let resumed = run_experiment(&cfg).unwrap();

    let fresh = run_experiment(&ExperimentConfig {
        output_dir: b.path().to_path_buf(),
        ..cfg.clone()
    })
    .unwrap();
    assert_eq!(resumed.metrics, fresh.metrics);
    assert_eq!(
        fs::read(resumed.dir.join(METRICS_FILE)).unwrap(),
        fs::read(fresh.dir.join(METRICS_FILE)).unwrap()
    );
}

#[test]
fn changed_config_in_existing_dir_is_rejected() {
    let a = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg(a.path(), "x");
    init_run_dir(&cfg).unwrap();
    init_run_dir(&cfg).unwrap();
    let mut other = cfg.clone();
    other.seed = 1;
    assert!(init_run_dir(&other).is_err());
}

#[test]
fn single_modal_and_zero_pad_methods_run() {
    let a = tempfile::tempdir().unwrap();
    let mut cfg = tiny_cfg(a.path(), "single");
    cfg.n_folds = 1;
    cfg.method = Method::SingleModal;
    let rep = run_experiment(&cfg).unwrap();
    let labels: Vec<&str> = rep.metrics.results.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["single-modal rgb", "single-modal depth"]);
    assert!(rep.metrics.transfer_direction.is_none());

    cfg.experiment_id = "zp".into();
    cfg.method = Method::ZeroPad;
    let rep = run_experiment(&cfg).unwrap();
    assert_eq!(rep.metrics.results.len(), 2);
    assert!(rep.metrics.results.iter().all(|r| r.label == "zero-pad"));
}

#[test]
fn sweep_configs_add_the_classification_layer_run() {
    let base = tiny_cfg(Path::new("/tmp"), "sw");
    let subs = sweep_configs(&base, SweepAxis::EmbeddingSize, &["32".into(), "128".into(), "256".into()]).unwrap();
    assert_eq!(subs.len(), 4);
    assert_eq!(subs[3].0, CLASSIFICATION_LAYER);
    assert_eq!(subs[3].1.train.loss_kind, LossKind::SoftmaxCls);
    assert_eq!(subs[1].1.model.embedding_dim, 128);
    assert!(subs.iter().all(|(_, c)| c.seed == base.seed));
    assert!(sweep_configs(&base, SweepAxis::EmbeddingSize, &[]).is_err());
    assert!(sweep_configs(&base, SweepAxis::EmbeddingSize, &["0".into()]).is_err());
    assert!(sweep_configs(&base, SweepAxis::FreezeStage, &["stage9".into()]).is_err());
    assert_eq!(sweep_configs(&base, SweepAxis::FreezeStage, &["stage2".into()]).unwrap().len(), 1);
    assert_eq!("embedding-size".parse::<SweepAxis>().unwrap(), SweepAxis::EmbeddingSize);
}

#[test]
fn sweep_runs_reports_and_plots_deterministically() {
    let a = tempfile::tempdir().unwrap();
    let mut base = tiny_cfg(a.path(), "sw");
    base.n_folds = 1;
    base.method = Method::OneStream;
    let rep = run_sweep(&base, SweepAxis::EmbeddingSize, &["8".into(), "16".into(), "24".into()]).unwrap();
    assert_eq!(rep.rows.len(), 4);
    assert!(rep.rows.iter().all(|r| r.error.is_none()));
    let series = sweep_series(&rep);
    assert_eq!(series.len(), 2);
    assert!(series.values().all(|pts| pts.len() == 4));
    let dir = base.run_dir();
    assert!(dir.join(SWEEP_FILE).is_file() && dir.join("sweep.md").is_file());

    fs::write(dir.join("broken").with_extension("json"), b"{").unwrap();
    fs::create_dir_all(dir.join("junk")).unwrap();
    fs::write(dir.join("junk").join(METRICS_FILE), b"not json").unwrap();
    let plots = emit_plots(a.path()).unwrap();
    assert_eq!(plots.len(), 5, "{plots:?}");
    let first: Vec<Vec<u8>> = plots.iter().map(|p| fs::read(p).unwrap()).collect();
    assert!(first.iter().all(|b| b.starts_with(b"<svg")));
    let again = emit_plots(a.path()).unwrap();
    assert_eq!(again, plots);
    let second: Vec<Vec<u8>> = again.iter().map(|p| fs::read(p).unwrap()).collect();
    assert_eq!(first, second);
}

#[test]
fn ablation_reports_scenarios_in_fixed_order() {
    let a = tempfile::tempdir().unwrap();
    let mut base = tiny_cfg(a.path(), "abl");
    base.n_folds = 1;
    let rep = run_ablation(&base).unwrap();
    let values: Vec<&str> = rep.rows.iter().map(|r| r.value.as_str()).collect();
    assert_eq!(values, ["neither", "copy", "copy+freeze"]);
    for row in &rep.rows {
        assert!(row.error.is_none());
        let dirs: Vec<&str> = row.results.iter().map(|r| r.result.direction.label()).collect();
        assert_eq!(dirs, ["Q:RGB,G:D", "Q:D,G:RGB"]);
    }
    // the copy+freeze sub-run equals a plain distillation run with the same seeds
    let plain = run_experiment(&ExperimentConfig {
        output_dir: a.path().join("plain"),
        ..base.clone()
    })
    .unwrap();
    assert_eq!(rep.rows[2].results[0].result, plain.metrics.results[0].result);

    base.method = Method::OneStream;
    base.experiment_id = "abl2".into();
    assert!(run_ablation(&base).is_err());
}
