use super::*;
use crate::dataset::{preprocess_image, PreprocPolicy, RawImage};

fn tiny(seed: u64) -> ModelState {
    build_backbone(Variant::Tiny, HeadConfig::preliminary(32, Some(5)), Init::Random, seed).unwrap()
}

fn input(n: usize, c: usize, seed: u64) -> Tensor {
    let mut rng = crate::seed::rng(seed);
    let data: Vec<f32> = (0..n * c * 256 * 128).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(data, (n, c, 256, 128), &Device::Cpu).unwrap()
}

fn max_diff(a: &Tensor, b: &Tensor) -> f32 {
    (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap()
}

#[test]
fn initialisation_is_seed_deterministic() {
    assert_eq!(tiny(3).checksum().unwrap(), tiny(3).checksum().unwrap());
    assert_ne!(tiny(3).checksum().unwrap(), tiny(4).checksum().unwrap());
}

#[test]
fn forward_shapes_follow_head() {
    let m = tiny(1);
    let out = m.forward(&input(3, 3, 0), &ForwardCtx::EVAL).unwrap();
    assert_eq!(out.embedding.dims(), &[3, 32]);
    assert_eq!(out.logits.unwrap().dims(), &[3, 5]);

    let cl = build_backbone(Variant::Tiny, HeadConfig::classification_layer(7, 16), Init::Random, 1).unwrap();
    let out = cl.forward(&input(2, 3, 0), &ForwardCtx::EVAL).unwrap();
    assert_eq!(out.embedding.dims(), &[2, 7]);
    assert_eq!(max_diff(&out.embedding, &out.logits.unwrap()), 0.0);
}

#[test]
fn invalid_heads_are_rejected() {
    let bad = HeadConfig {
        kind: HeadKind::ClassificationLayer,
        embedding_dim: 8,
        n_classes: Some(5),
        preliminary_dim: 16,
    };
    assert!(build_backbone(Variant::Tiny, bad, Init::Random, 0).is_err());
    assert!(build_backbone(Variant::Tiny, HeadConfig::preliminary(0, None), Init::Random, 0).is_err());
}

#[test]
fn every_parameter_belongs_to_exactly_one_stage() {
    let m = tiny(0);
    let mut seen = BTreeSet::new();
    for stage in &m.taxonomy().stages {
        assert!(!stage.params.is_empty(), "stage {} is empty", stage.name);
        for p in &stage.params {
            assert!(seen.insert(p.clone()), "{p} listed twice");
        }
    }
    let all: BTreeSet<String> = m.parameter_names().map(String::from).collect();
    assert_eq!(seen, all);
    let names: Vec<&str> = m.taxonomy().stages.iter().map(|s| s.name.as_str()).collect();
    assert_eq!(names, STAGES);
}

#[test]
fn tiny_is_desk_scale() {
    let n = tiny(0).num_parameters();
    assert!((100_000..200_000).contains(&n), "{n} parameters");
}

#[test]
fn copy_reproduces_outputs_and_checks_architecture() {
    let src = tiny(1);
    let dst = copy_weights(&src, tiny(2)).unwrap();
    let x = input(2, 3, 9);
    let a = src.forward(&x, &ForwardCtx::EVAL).unwrap().embedding;
    let b = dst.forward(&x, &ForwardCtx::EVAL).unwrap().embedding;
    assert_eq!(max_diff(&a, &b), 0.0);
    assert_eq!(src.checksum().unwrap(), dst.checksum().unwrap());

    let other = build_backbone(Variant::Tiny, HeadConfig::preliminary(16, Some(5)), Init::Random, 1).unwrap();
    assert!(matches!(copy_weights(&src, other), Err(Error::Architecture(_))));
}

#[test]
fn clone_is_deep() {
    let a = tiny(1);
    let mut b = a.clone();
    let w = b.parameter("stem.weight").unwrap().zeros_like().unwrap();
    b.set_tensor("stem.weight", &w).unwrap();
    assert_ne!(a.checksum().unwrap(), b.checksum().unwrap());
}

#[test]
fn frozen_stages_receive_no_gradient() {
    let mut m = tiny(5);
    m.freeze_from("stage3").unwrap();
    let frozen = m.freeze_mask().clone();
    assert!(frozen.contains("stage3.conv_a.weight"));
    assert!(frozen.contains("head.embed.weight"));
    assert!(!frozen.contains("stage2.conv_b.weight"));
    let out = m.forward(&input(2, 3, 1), &ForwardCtx::TRAIN).unwrap();
    let grads = out.embedding.sqr().unwrap().sum_all().unwrap().backward().unwrap();
    for name in m.parameter_names() {
        let has = grads.get(m.parameter(name).unwrap()).is_some();
        assert_eq!(has, !frozen.contains(name), "{name}");
    }
    assert_eq!(m.trainable_vars().len(), m.parameter_names().count() - frozen.len());
    assert!(m.freeze_from("stage9").is_err());
}

#[test]
fn zero_padding_places_modalities_in_disjoint_channels() {
    let policy = PreprocPolicy::default();
    let rgb = preprocess_image(&RawImage::filled(8, 16, &[0.2, 0.4, 0.6]), Modality::Rgb, &policy).unwrap();
    let d = preprocess_image(&RawImage::filled(8, 16, &[1.5]), Modality::Depth, &policy).unwrap();

    let pr = zero_pad_input(&rgb, ZeroPadMode::FourChannel).unwrap();
    let pd = zero_pad_input(&d, ZeroPadMode::FourChannel).unwrap();
    assert_eq!(pr.channels, 4);
    assert_eq!(&pr.data[..3 * 256 * 128], rgb.data.as_slice());
    assert!(pr.plane(3).iter().all(|&v| v == 0.0));
    assert!((0..3).all(|c| pd.plane(c).iter().all(|&v| v == 0.0)));
    assert_eq!(pd.plane(3), d.plane(0));

    let gr = zero_pad_input(&rgb, ZeroPadMode::Gray).unwrap();
    assert_eq!(gr.channels, 2);
    assert!(gr.plane(0).iter().all(|&v| (v - 0.4).abs() < 1e-6));
    assert!(gr.plane(1).iter().all(|&v| v == 0.0));

    let m = build_backbone_with_channels(Variant::Tiny, 4, HeadConfig::preliminary(8, None), Init::Random, 0).unwrap();
    let e = forward_embed(&m, &[&rgb, &d], InputAdapter::ZeroPad(ZeroPadMode::FourChannel)).unwrap();
    assert_eq!((e.rows(), e.dim()), (2, 8));
    assert!(forward_embed(&m, &[&rgb], InputAdapter::Identity).is_err());
}

#[test]
fn forward_embed_matches_batched_rows() {
    let policy = PreprocPolicy::default();
    let imgs: Vec<ImageTensor> = (0..3)
        .map(|i| preprocess_image(&RawImage::filled(8, 16, &[0.1 * i as f32, 0.5, 0.9]), Modality::Rgb, &policy).unwrap())
        .collect();
    let refs: Vec<&ImageTensor> = imgs.iter().collect();
    let m = tiny(2);
    let all = forward_embed(&m, &refs, InputAdapter::Identity).unwrap();
    let chunked = embed_all(&m, &refs, InputAdapter::Identity, 2).unwrap();
    for i in 0..3 {
        let one = forward_embed(&m, &refs[i..=i], InputAdapter::Identity).unwrap();
        for (a, b) in one.row(0).iter().zip(all.row(i)) {
            assert!((a - b).abs() < 1e-5);
        }
        assert_eq!(chunked.row(i), all.row(i));
    }
}

#[test]
fn checkpoint_round_trip_preserves_everything() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut m = tiny(8);
    m.freeze_from("stage4").unwrap();
    let meta = CheckpointMeta {
        seed: 8,
        epoch: 3,
        step: 40,
        best_metric: Some(0.5),
        ..Default::default()
    };
    save_checkpoint(&m, &meta, &path).unwrap();
    let (back, meta_back) = load_checkpoint(&path).unwrap();
    assert_eq!(meta_back, meta);
    assert_eq!(back.checksum().unwrap(), m.checksum().unwrap());
    assert_eq!(back.freeze_mask(), m.freeze_mask());
    let x = input(1, 3, 3);
    let a = m.forward(&x, &ForwardCtx::EVAL).unwrap().embedding;
    let b = back.forward(&x, &ForwardCtx::EVAL).unwrap().embedding;
    assert_eq!(max_diff(&a, &b), 0.0);

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
}

#[test]
fn pretrained_requests_fail_with_remedy() {
    let err = build_backbone(Variant::Tiny, HeadConfig::preliminary(8, None), Init::Pretrained(None), 0).unwrap_err();
    assert!(matches!(err, Error::PretrainedUnavailable { .. }));
    let missing = Init::Pretrained(Some(PathBuf::from("/nonexistent/resnet18.safetensors")));
    let err = build_backbone(Variant::Shallow, HeadConfig::preliminary(8, None), missing, 0).unwrap_err();
    assert!(matches!(err, Error::PretrainedUnavailable { .. }));
}

#[test]
fn shallow_loads_pretrained_and_widens_stem() {
    let head = HeadConfig::preliminary(16, None);
    let src = build_backbone(Variant::Shallow, head.clone(), Init::Random, 11).unwrap();
    let tensors: std::collections::HashMap<String, Tensor> = src
        .parameter_names()
        .filter(|n| !n.starts_with("head."))
        .map(|n| (n.to_string(), src.parameter(n).unwrap().clone()))
        .chain(src.buffer_names().map(|n| (n.to_string(), src.buffer(n).unwrap().clone())))
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("resnet18.safetensors");
    candle_core::safetensors::save(&tensors, &path).unwrap();

    let m = build_backbone_with_channels(Variant::Shallow, 4, head, Init::Pretrained(Some(path)), 0).unwrap();
    let w = m.parameter("conv1.weight").unwrap();
    let orig = src.parameter("conv1.weight").unwrap();
    assert_eq!(max_diff(&w.narrow(1, 0, 3).unwrap(), orig), 0.0);
    let mean = orig.mean_keepdim(1).unwrap();
    assert!(max_diff(&w.narrow(1, 3, 1).unwrap(), &mean) < 1e-6);
    assert_eq!(
        m.checksum_of(["layer4.1.conv2.weight"]).unwrap(),
        src.checksum_of(["layer4.1.conv2.weight"]).unwrap()
    );
    let out = m.forward(&input(2, 4, 0), &ForwardCtx::TRAIN).unwrap();
    assert_eq!(out.embedding.dims(), &[2, 16]);
}

#[test]
fn deep_variant_builds_with_expected_width() {
    let m = build_backbone(Variant::Deep, HeadConfig::preliminary(8, None), Init::Random, 0).unwrap();
    assert_eq!(m.parameter("head.embed.weight").unwrap().dims(), &[8, 2048]);
    assert!(m.parameter("layer3.5.conv3.weight").is_some());
    let n = m.num_parameters();
    assert!((23_000_000..25_000_000).contains(&n), "{n}");
}
