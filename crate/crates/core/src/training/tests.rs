use std::sync::OnceLock;

use super::*;
use crate::dataset::{generate_synthetic, PreprocPolicy, SynthSpec};

struct Fixture {
    train: ImageSet,
    val: ImageSet,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let spec = SynthSpec {
            n_identities: 6,
            images_per_identity: 8,
            ..SynthSpec::default()
        };
        let index = generate_synthetic(&spec, 11).unwrap();
        let all = ImageSet::from_index(&index, &PreprocPolicy::default()).unwrap();
        let ids: Vec<u32> = all.identities().into_iter().collect();
        Fixture {
            train: all.restrict(&ids[..4].iter().copied().collect()),
            val: all.restrict(&ids[4..].iter().copied().collect()),
        }
    })
}

fn quick_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs: epochs,
        batch_size: 16,
        pk_p: 4,
        pk_k: 4,
        learning_rate: 1e-3,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn spec() -> ModelSpec {
    ModelSpec {
        embedding_dim: 16,
        ..ModelSpec::default()
    }
}

fn teacher() -> &'static ModelState {
    static T: OnceLock<ModelState> = OnceLock::new();
    T.get_or_init(|| {
        let f = fixture();
        train_step1(
            &quick_cfg(1),
            &spec(),
            &f.train.of_modality(Modality::Depth),
            &f.val.of_modality(Modality::Depth),
            Modality::Depth,
            None,
        )
        .unwrap()
        .0
    })
}

#[test]
fn one_epoch_gives_one_record_and_consistent_best() {
    let f = fixture();
    let (model, log) = train_step1(
        &quick_cfg(1),
        &spec(),
        &f.train.of_modality(Modality::Rgb),
        &f.val.of_modality(Modality::Rgb),
        Modality::Rgb,
        None,
    )
    .unwrap();
    assert_eq!(log.records.len(), 1);
    let best = log.records.iter().map(|r| r.val_metric).fold(f64::MIN, f64::max);
    assert_eq!(log.best_metric, best);
    assert_eq!(model.freeze_mask().len(), model.parameter_names().count());
}

#[test]
fn step1_rejects_wrong_modality() {
    let f = fixture();
    let err = train_step1(&quick_cfg(1), &spec(), &f.train, &f.val.of_modality(Modality::Rgb), Modality::Rgb, None);
    assert!(matches!(err, Err(Error::Precondition(_))));
}

#[test]
fn triplet_step1_runs_with_pk_batches() {
    let f = fixture();
    let cfg = TrainConfig {
        loss_kind: LossKind::Triplet,
        ..quick_cfg(1)
    };
    let (model, log) = train_step1(
        &cfg,
        &spec(),
        &f.train.of_modality(Modality::Rgb),
        &f.val.of_modality(Modality::Rgb),
        Modality::Rgb,
        None,
    )
    .unwrap();
    assert!(model.head().n_classes.is_none());
    assert!(log.records[0].train_loss >= 0.0);
}

#[test]
fn training_is_deterministic() {
    let f = fixture();
    let run = || {
        train_step1(
            &quick_cfg(2),
            &spec(),
            &f.train.of_modality(Modality::Rgb),
            &f.val.of_modality(Modality::Rgb),
            Modality::Rgb,
            None,
        )
        .unwrap()
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la.train_losses(), lb.train_losses());
    assert_eq!(a.checksum().unwrap(), b.checksum().unwrap());
}

#[test]
fn step2_respects_freeze_and_teacher_immutability() {
    let f = fixture();
    let t = teacher();
    let before = t.checksum().unwrap();
    let (student, _) = train_step2(
        &quick_cfg(2),
        t,
        Modality::Depth,
        Modality::Rgb,
        &f.train,
        &f.val,
        Scenario::COPY_FREEZE,
        None,
    )
    .unwrap();
    assert_eq!(t.checksum().unwrap(), before);
    let frozen = t.taxonomy().params_from("stage3").unwrap();
    for name in t.parameter_names() {
        let same = t.checksum_of([name]).unwrap() == student.checksum_of([name]).unwrap();
        if frozen.contains(name) {
            assert!(same, "{name} changed although frozen");
        }
    }
    assert!(t
        .parameter_names()
        .any(|n| !frozen.contains(n) && t.checksum_of([n]).unwrap() != student.checksum_of([n]).unwrap()));
}

#[test]
fn freezing_from_stem_changes_nothing() {
    let f = fixture();
    let t = teacher();
    let cfg = TrainConfig {
        freeze_stage: "stem".into(),
        ..quick_cfg(1)
    };
    let (student, _) = train_step2(&cfg, t, Modality::Depth, Modality::Rgb, &f.train, &f.val, Scenario::COPY_FREEZE, None).unwrap();
    assert_eq!(student.checksum().unwrap(), t.checksum().unwrap());
}

#[test]
fn self_distillation_stays_at_zero() {
    let f = fixture();
    let t = teacher();
    let (_, log) = train_step2(&quick_cfg(2), t, Modality::Depth, Modality::Depth, &f.train, &f.val, Scenario::COPY_ONLY, None).unwrap();
    for r in &log.records {
        assert!(r.val_metric < 1e-10, "{}", r.val_metric);
        assert!(r.train_loss < 1e-10);
    }
}

#[test]
fn step2_without_copy_starts_from_scratch() {
    let f = fixture();
    let t = teacher();
    let (student, log) = train_step2(&quick_cfg(1), t, Modality::Depth, Modality::Rgb, &f.train, &f.val, Scenario::NEITHER, None).unwrap();
    assert!(log.records[0].val_metric > 0.0);
    assert_ne!(
        student.checksum_of(["stage4.conv_b.weight"]).unwrap(),
        t.checksum_of(["stage4.conv_b.weight"]).unwrap()
    );
}

#[test]
fn one_stream_and_zero_padding_smoke() {
    let f = fixture();
    let (m, log) = train_one_stream(&quick_cfg(2), &spec(), &f.train, &f.val, None).unwrap();
    assert_eq!(m.in_channels(), 3);
    let running: Vec<f64> = log
        .records
        .iter()
        .scan(f64::MIN, |best, r| {
            *best = best.max(r.val_metric);
            Some(*best)
        })
        .collect();
    assert!(running.windows(2).all(|w| w[0] <= w[1]));
    assert!(log.records.iter().all(|r| (0.0..=1.0).contains(&r.val_metric)));

    let (z, _) = train_zero_padding(&quick_cfg(1), &spec(), &f.train, &f.val, None).unwrap();
    assert_eq!(z.in_channels(), 4);
}

#[test]
fn all_depth_batch_gives_zero_gradient_on_rgb_stem_channels() {
    let f = fixture();
    let m = spec().build(LossKind::SoftmaxPrelim, 4, 4, 0).unwrap();
    let depth = f.train.of_modality(Modality::Depth);
    let idx: Vec<usize> = (0..8).collect();
    let x = images_to_tensor(&depth.refs(&idx), InputAdapter::ZeroPad(ZeroPadMode::FourChannel), m.device()).unwrap();
    assert_eq!(x.dims(), &[8, 4, 256, 128]);
    let classes: Vec<u32> = depth.labels[..8].iter().map(|l| depth.class_map()[l]).collect();
    let loss = supervised_loss(&TrainConfig::default(), &m, &x, &depth.labels[..8], &classes).unwrap();
    let grads = loss.backward().unwrap();
    let g = grads.get(m.parameter("stem.weight").unwrap()).unwrap();
    let rgb_part = g.narrow(1, 0, 3).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
    let depth_part = g.narrow(1, 3, 1).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
    assert_eq!(rgb_part, 0.0);
    assert!(depth_part > 0.0);
}

#[test]
fn checkpoints_keep_only_latest_best() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let sink = CheckpointSink {
        dir: dir.path().to_path_buf(),
        experiment_id: "exp".into(),
        fold: 0,
    };
    let (_, log) = train_step2(&quick_cfg(3), teacher(), Modality::Depth, Modality::Rgb, &f.train, &f.val, Scenario::COPY_FREEZE, Some(&sink)).unwrap();
    let files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(files.len(), 1);
    let name = files[0].file_name().unwrap().to_string_lossy().into_owned();
    assert_eq!(name, format!("exp_step2-depth-to-rgb_fold0_epoch{:03}.ckpt", log.best_epoch));
    let (m, meta) = crate::backbone::load_checkpoint(&files[0]).unwrap();
    assert_eq!(meta.best_metric, Some(log.best_metric));
    assert_eq!(m.variant(), Variant::Tiny);
}

#[test]
fn config_problems_are_listed() {
    let cfg = TrainConfig {
        max_epochs: 0,
        loss_kind: LossKind::Triplet,
        batch_size: 60,
        freeze_stage: "stage7".into(),
        ..TrainConfig::default()
    };
    assert_eq!(cfg.problems().len(), 3);
    assert!(TrainConfig::default().validate().is_ok());
}

