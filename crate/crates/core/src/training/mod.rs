//! Two-step cross-modal distillation and the shared-network baselines.
//!
//! Step I trains a network on the source modality with an identity loss and
//! early-stops on validation mAP. Step II copies it into a student, freezes the
//! later stages and regresses the student's embedding of each target-modality
//! image onto the frozen teacher's embedding of the paired source image.

mod data;
mod sampler;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::backbone::{
    build_backbone_with_channels, images_to_tensor, save_checkpoint, CheckpointMeta, ForwardCtx, HeadConfig,
    Init, InputAdapter, ModelState, Variant, ZeroPadMode, STAGES,
};
use crate::dataset::Modality;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_cross_modal, evaluate_single_modal, ProtocolSpec};
use crate::losses::{cross_entropy, mse_distill, triplet_batch_hard, LossKind, TripletConfig};
use crate::seed;

pub use data::{embed_set, ImageSet, EMBED_CHUNK};
pub use sampler::{mixed_modality_batches, paired_batches, pk_sample_batches, shuffled_batches};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub pk_p: usize,
    pub pk_k: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub patience: usize,
    /// First stage frozen in step II.
    pub freeze_stage: String,
    pub loss_kind: LossKind,
    pub triplet: TripletConfig,
    /// Gallery repetitions of the validation protocol.
    pub val_repetitions: usize,
    /// Keep the short final batch of an epoch.
    pub emit_partial_batches: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 60,
            batch_size: 64,
            pk_p: 16,
            pk_k: 4,
            learning_rate: 3e-4,
            weight_decay: 0.0,
            seed: 0,
            patience: 10,
            freeze_stage: "stage3".into(),
            loss_kind: LossKind::SoftmaxPrelim,
            triplet: TripletConfig::default(),
            val_repetitions: 2,
            emit_partial_batches: true,
        }
    }
}

impl TrainConfig {
    /// Every violated constraint, one message each.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.max_epochs == 0 {
            out.push("train.max_epochs must be at least 1".to_string());
        }
        if self.batch_size == 0 {
            out.push("train.batch_size must be positive".to_string());
        }
        if self.loss_kind == LossKind::Triplet && self.pk_p * self.pk_k != self.batch_size {
            out.push(format!(
                "train.pk_p x train.pk_k = {} must equal train.batch_size = {} for triplet loss",
                self.pk_p * self.pk_k,
                self.batch_size
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            out.push("train.learning_rate must be positive".to_string());
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            out.push("train.weight_decay must be nonnegative".to_string());
        }
        if !STAGES.contains(&self.freeze_stage.as_str()) {
            out.push(format!("train.freeze_stage `{}` is not one of {STAGES:?}", self.freeze_stage));
        }
        if !(self.triplet.margin.is_finite() && self.triplet.margin >= 0.0) {
            out.push("train.triplet.margin must be finite and nonnegative".to_string());
        }
        if self.val_repetitions == 0 {
            out.push("train.val_repetitions must be at least 1".to_string());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        match self.problems().first() {
            Some(p) => Err(Error::Config(p.clone())),
            None => Ok(()),
        }
    }

    fn val_protocol(&self) -> ProtocolSpec {
        ProtocolSpec {
            gallery_repetitions: self.val_repetitions,
            seed: seed::derive_labeled(self.seed, "val-protocol", &[]),
            ..ProtocolSpec::default()
        }
    }

    fn optimizer(&self, vars: Vec<candle_core::Var>) -> Result<AdamW> {
        Ok(AdamW::new(
            vars,
            ParamsAdamW {
                lr: self.learning_rate,
                weight_decay: self.weight_decay,
                ..ParamsAdamW::default()
            },
        )?)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InitKind {
    #[default]
    Random,
    Pretrained,
}

/// Architecture choices shared by every network of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub variant: Variant,
    pub init: InitKind,
    /// Overrides the pretrained weight file location.
    pub pretrained_path: Option<PathBuf>,
    /// Width of the preliminary embedding layer.
    pub embedding_dim: usize,
    pub zero_pad: ZeroPadMode,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            variant: Variant::Tiny,
            init: InitKind::Random,
            pretrained_path: None,
            embedding_dim: 128,
            zero_pad: ZeroPadMode::FourChannel,
        }
    }
}

impl ModelSpec {
    pub fn head(&self, loss: LossKind, n_classes: usize) -> HeadConfig {
        match loss {
            LossKind::Triplet => HeadConfig::preliminary(self.embedding_dim, None),
            LossKind::SoftmaxPrelim => HeadConfig::preliminary(self.embedding_dim, Some(n_classes)),
            LossKind::SoftmaxCls => HeadConfig::classification_layer(n_classes, self.embedding_dim),
        }
    }

    pub fn build(&self, loss: LossKind, n_classes: usize, in_channels: usize, seed_value: u64) -> Result<ModelState> {
        let init = match self.init {
            InitKind::Random => Init::Random,
            InitKind::Pretrained => Init::Pretrained(self.pretrained_path.clone()),
        };
        build_backbone_with_channels(self.variant, in_channels, self.head(loss, n_classes), init, seed_value)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub metric: String,
    pub higher_is_better: bool,
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub stopped_early: bool,
}

impl TrainLog {
    fn new(metric: &str, higher_is_better: bool) -> Self {
        Self {
            metric: metric.to_string(),
            higher_is_better,
            records: Vec::new(),
            best_epoch: 0,
            best_metric: if higher_is_better { f64::NEG_INFINITY } else { f64::INFINITY },
            stopped_early: false,
        }
    }

    fn improves(&self, v: f64) -> bool {
        if self.higher_is_better {
            v > self.best_metric
        } else {
            v < self.best_metric
        }
    }

    /// One JSON object per epoch.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for r in &self.records {
            let line = serde_json::to_string(r)?;
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.train_loss).collect()
    }
}

/// Where best-so-far checkpoints go. Only the latest best of each step is kept.
#[derive(Clone, Debug)]
pub struct CheckpointSink {
    pub dir: PathBuf,
    pub experiment_id: String,
    pub fold: usize,
}

impl CheckpointSink {
    pub fn path(&self, step: &str, epoch: usize) -> PathBuf {
        self.dir
            .join(format!("{}_{step}_fold{}_epoch{epoch:03}.ckpt", self.experiment_id, self.fold))
    }
}

/// Runs epochs until `max_epochs` or until the validation metric has not
/// improved for `patience` epochs. Returns the best model, fully frozen.
fn run_epochs(
    cfg: &TrainConfig,
    model: ModelState,
    step: &str,
    mut log: TrainLog,
    sink: Option<&CheckpointSink>,
    mut train_epoch: impl FnMut(&ModelState, usize) -> Result<f64>,
    mut validate: impl FnMut(&ModelState) -> Result<f64>,
) -> Result<(ModelState, TrainLog)> {
    let start = Instant::now();
    let mut best: Option<ModelState> = None;
    let mut last_ckpt: Option<PathBuf> = None;
    let mut since_best = 0usize;
    let mut global_step = 0u64;
    for epoch in 0..cfg.max_epochs {
        let train_loss = train_epoch(&model, epoch)?;
        global_step += 1;
        if !train_loss.is_finite() {
            return Err(Error::Divergence(format!("{step}: training loss {train_loss} at epoch {epoch}")));
        }
        let val = validate(&model)?;
        if !val.is_finite() {
            return Err(Error::Divergence(format!("{step}: validation {} {val} at epoch {epoch}", log.metric)));
        }
        log.records.push(EpochRecord {
            epoch,
            train_loss,
            val_metric: val,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        log::info!("{step} epoch {epoch}: loss {train_loss:.5} val {} {val:.5}", log.metric);
        if log.improves(val) {
            log.best_metric = val;
            log.best_epoch = epoch;
            since_best = 0;
            let snapshot = model.clone();
            if let Some(sink) = sink {
                let path = sink.path(step, epoch);
                let meta = CheckpointMeta {
                    seed: cfg.seed,
                    epoch,
                    step: global_step,
                    best_metric: Some(val),
                    ..Default::default()
                };
                save_checkpoint(&snapshot, &meta, &path)?;
                if let Some(old) = last_ckpt.replace(path) {
                    let _ = fs::remove_file(old);
                }
            }
            best = Some(snapshot);
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    let mut best = best.expect("max_epochs >= 1 yields a best model");
    best.freeze_all();
    Ok((best, log))
}

fn check_modality(set: &ImageSet, m: Modality, what: &str) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Precondition(format!("{what} set is empty")));
    }
    if let Some(i) = (0..set.len()).find(|&i| set.modality(i) != m) {
        return Err(Error::Precondition(format!(
            "{what} set must be {m}-only; `{}` is {}",
            set.pair_keys[i],
            set.modality(i)
        )));
    }
    Ok(())
}

/// Identity-supervised batch loss.
fn supervised_loss(
    cfg: &TrainConfig,
    model: &ModelState,
    x: &Tensor,
    identities: &[u32],
    classes: &[u32],
) -> Result<Tensor> {
    let out = model.forward(x, &ForwardCtx::TRAIN)?;
    match cfg.loss_kind {
        LossKind::Triplet => triplet_batch_hard(&out.embedding, identities, &cfg.triplet),
        LossKind::SoftmaxPrelim | LossKind::SoftmaxCls => {
            let logits = out
                .logits
                .ok_or_else(|| Error::Config("softmax loss needs a classifier head".into()))?;
            cross_entropy(&logits, classes)
        }
    }
}

fn supervised_batches(cfg: &TrainConfig, set: &ImageSet, seed_value: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    match cfg.loss_kind {
        LossKind::Triplet => pk_sample_batches(&set.labels, cfg.pk_p, cfg.pk_k, seed_value, epoch),
        _ => shuffled_batches(set.len(), cfg.batch_size, seed_value, epoch, cfg.emit_partial_batches),
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// Shared supervised loop. `batches` yields index lists into `train`.
fn train_supervised(
    cfg: &TrainConfig,
    model: ModelState,
    train: &ImageSet,
    adapter: InputAdapter,
    step: &str,
    log: TrainLog,
    sink: Option<&CheckpointSink>,
    batches: impl Fn(usize) -> Result<Vec<Vec<usize>>>,
    validate: impl FnMut(&ModelState) -> Result<f64>,
) -> Result<(ModelState, TrainLog)> {
    let class_map = train.class_map();
    let mut opt = cfg.optimizer(model.trainable_vars())?;
    let train_epoch = |m: &ModelState, epoch: usize| -> Result<f64> {
        let mut total = 0.0;
        let mut n = 0usize;
        for idx in batches(epoch)? {
            let x = images_to_tensor(&train.refs(&idx), adapter, m.device())?;
            let ids: Vec<u32> = idx.iter().map(|&i| train.labels[i]).collect();
            let classes: Vec<u32> = ids.iter().map(|l| class_map[l]).collect();
            let loss = supervised_loss(cfg, m, &x, &ids, &classes)?;
            let v = scalar(&loss)?;
            if !v.is_finite() {
                return Ok(v);
            }
            opt.backward_step(&loss)?;
            total += v * idx.len() as f64;
            n += idx.len();
        }
        Ok(total / n.max(1) as f64)
    };
    run_epochs(cfg, model, step, log, sink, train_epoch, validate)
}

/// Step I: trains a single-modality network and returns the best model by
/// validation mAP, frozen.
pub fn train_step1(
    cfg: &TrainConfig,
    spec: &ModelSpec,
    train: &ImageSet,
    val: &ImageSet,
    modality: Modality,
    sink: Option<&CheckpointSink>,
) -> Result<(ModelState, TrainLog)> {
    cfg.validate()?;
    check_modality(train, modality, "training")?;
    check_modality(val, modality, "validation")?;
    let n_classes = train.identities().len();
    let model = spec.build(cfg.loss_kind, n_classes, 3, seed::derive_labeled(cfg.seed, "init-step1", &[]))?;
    let protocol = cfg.val_protocol();
    let batch_seed = seed::derive_labeled(cfg.seed, "batches-step1", &[]);
    train_supervised(
        cfg,
        model,
        train,
        InputAdapter::Identity,
        &format!("step1-{modality}"),
        TrainLog::new("val_map", true),
        sink,
        |epoch| supervised_batches(cfg, train, batch_seed, epoch),
        |m| {
            let set = embed_set(m, val, InputAdapter::Identity)?;
            Ok(evaluate_single_modal(&set, &protocol)?.mean.map)
        },
    )
}

/// Initialisation of the step II student.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub copy_weights: bool,
    pub freeze: bool,
}

impl Scenario {
    pub const COPY_FREEZE: Scenario = Scenario {
        copy_weights: true,
        freeze: true,
    };
    pub const COPY_ONLY: Scenario = Scenario {
        copy_weights: true,
        freeze: false,
    };
    pub const NEITHER: Scenario = Scenario {
        copy_weights: false,
        freeze: false,
    };

    pub fn label(&self) -> &'static str {
        match (self.copy_weights, self.freeze) {
            (true, true) => "copy+freeze",
            (true, false) => "copy",
            (false, true) => "freeze",
            (false, false) => "neither",
        }
    }
}

impl Default for Scenario {
    fn default() -> Self {
        Self::COPY_FREEZE
    }
}

fn pair_members(set: &ImageSet, teacher_m: Modality, student_m: Modality) -> (Vec<usize>, Vec<usize>) {
    let pick = |m: Modality, (r, d): (usize, usize)| if m == Modality::Rgb { r } else { d };
    set.pairs()
        .into_iter()
        .map(|p| (pick(teacher_m, p), pick(student_m, p)))
        .unzip()
}

fn embed_rows(model: &ModelState, set: &ImageSet, idx: &[usize]) -> Result<Tensor> {
    let chunks = idx
        .chunks(EMBED_CHUNK)
        .map(|c| {
            let x = images_to_tensor(&set.refs(c), InputAdapter::Identity, model.device())?;
            Ok(model.forward(&x, &ForwardCtx::EVAL)?.embedding)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&chunks, 0)?)
}

/// Step II: distils `teacher` (trained on `teacher_modality`) into a student
/// for `student_modality` using the paired images of `train`. Early-stops on
/// the validation MSE over the pairs of `val`. Equal modalities give the
/// degenerate self-distillation case.
#[allow(clippy::too_many_arguments)]
pub fn train_step2(
    cfg: &TrainConfig,
    teacher: &ModelState,
    teacher_modality: Modality,
    student_modality: Modality,
    train: &ImageSet,
    val: &ImageSet,
    scenario: Scenario,
    sink: Option<&CheckpointSink>,
) -> Result<(ModelState, TrainLog)> {
    cfg.validate()?;
    if teacher.in_channels() != 3 {
        return Err(Error::Architecture("distillation needs three-channel networks".into()));
    }
    let teacher_sum = teacher.checksum()?;
    let (t_train, s_train) = pair_members(train, teacher_modality, student_modality);
    let (t_val, s_val) = pair_members(val, teacher_modality, student_modality);
    if t_train.is_empty() {
        return Err(Error::Precondition("no RGB-depth pairs in the training set".into()));
    }
    if t_val.is_empty() {
        return Err(Error::Precondition("no RGB-depth pairs in the validation set".into()));
    }
    // validation targets use the same chunking as the student's embeddings,
    // so self-distillation compares bit-identical values
    let target_val = embed_rows(teacher, val, &t_val)?;

    let mut student = if scenario.copy_weights {
        teacher.clone()
    } else {
        build_backbone_with_channels(
            teacher.variant(),
            teacher.in_channels(),
            teacher.head().clone(),
            Init::Random,
            seed::derive_labeled(cfg.seed, "init-step2", &[]),
        )?
    };
    if scenario.freeze {
        student.freeze_from(&cfg.freeze_stage)?;
    } else {
        student.unfreeze_all();
    }
    let vars = student.trainable_vars();
    let has_trainable = !vars.is_empty();
    let mut opt = cfg.optimizer(vars)?;
    let batch_seed = seed::derive_labeled(cfg.seed, "batches-step2", &[]);
    let device = teacher.device().clone();

    let train_epoch = |m: &ModelState, epoch: usize| -> Result<f64> {
        let mut total = 0.0;
        let mut n = 0usize;
        for b in paired_batches(t_train.len(), cfg.batch_size, batch_seed, epoch, cfg.emit_partial_batches)? {
            let s_idx: Vec<usize> = b.iter().map(|&i| s_train[i]).collect();
            let t_idx: Vec<usize> = b.iter().map(|&i| t_train[i]).collect();
            let x = images_to_tensor(&train.refs(&s_idx), InputAdapter::Identity, &device)?;
            let tx = images_to_tensor(&train.refs(&t_idx), InputAdapter::Identity, &device)?;
            let target = teacher.forward(&tx, &ForwardCtx::EVAL)?.embedding;
            let loss = mse_distill(&target, &m.forward(&x, &ForwardCtx::TRAIN)?.embedding)?;
            let v = scalar(&loss)?;
            if !v.is_finite() {
                return Ok(v);
            }
            if has_trainable {
                opt.backward_step(&loss)?;
            }
            total += v * b.len() as f64;
            n += b.len();
        }
        Ok(total / n.max(1) as f64)
    };
    let validate = |m: &ModelState| -> Result<f64> {
        let pred = embed_rows(m, val, &s_val)?;
        scalar(&mse_distill(&target_val, &pred)?)
    };
    let step = format!("step2-{teacher_modality}-to-{student_modality}");
    let out = run_epochs(cfg, student, &step, TrainLog::new("val_mse", false), sink, train_epoch, validate)?;
    if teacher.checksum()? != teacher_sum {
        return Err(Error::Precondition("teacher parameters changed during distillation".into()));
    }
    Ok(out)
}

fn cross_modal_val(m: &ModelState, val: &ImageSet, adapter: InputAdapter, protocol: &ProtocolSpec) -> Result<f64> {
    let rgb = embed_set(m, &val.of_modality(Modality::Rgb), adapter)?;
    let depth = embed_set(m, &val.of_modality(Modality::Depth), adapter)?;
    let [a, b] = evaluate_cross_modal(&rgb, &depth, protocol)?;
    Ok(0.5 * (a.mean.map + b.mean.map))
}

fn train_shared(
    cfg: &TrainConfig,
    spec: &ModelSpec,
    train: &ImageSet,
    val: &ImageSet,
    adapter: InputAdapter,
    step: &str,
    sink: Option<&CheckpointSink>,
) -> Result<(ModelState, TrainLog)> {
    cfg.validate()?;
    let rgb = train.of_modality(Modality::Rgb);
    let depth = train.of_modality(Modality::Depth);
    let pooled = rgb.concat(&depth);
    let n_classes = pooled.identities().len();
    let model = spec.build(
        cfg.loss_kind,
        n_classes,
        adapter.in_channels(),
        seed::derive_labeled(cfg.seed, &format!("init-{step}"), &[]),
    )?;
    let protocol = cfg.val_protocol();
    let batch_seed = seed::derive_labeled(cfg.seed, &format!("batches-{step}"), &[]);
    let n_rgb = rgb.len();
    let n_depth = depth.len();
    train_supervised(
        cfg,
        model,
        &pooled,
        adapter,
        step,
        TrainLog::new("val_cross_map", true),
        sink,
        |epoch| match cfg.loss_kind {
            LossKind::Triplet => pk_sample_batches(&pooled.labels, cfg.pk_p, cfg.pk_k, batch_seed, epoch),
            _ => mixed_modality_batches(n_rgb, n_depth, cfg.batch_size, batch_seed, epoch),
        },
        |m| cross_modal_val(m, val, adapter, &protocol),
    )
}

/// One network for both modalities, trained on mixed batches.
pub fn train_one_stream(
    cfg: &TrainConfig,
    spec: &ModelSpec,
    train: &ImageSet,
    val: &ImageSet,
    sink: Option<&CheckpointSink>,
) -> Result<(ModelState, TrainLog)> {
    train_shared(cfg, spec, train, val, InputAdapter::Identity, "one-stream", sink)
}

/// One network whose input holds each modality in its own channels, with the
/// other modality's channels zeroed.
pub fn train_zero_padding(
    cfg: &TrainConfig,
    spec: &ModelSpec,
    train: &ImageSet,
    val: &ImageSet,
    sink: Option<&CheckpointSink>,
) -> Result<(ModelState, TrainLog)> {
    train_shared(cfg, spec, train, val, InputAdapter::ZeroPad(spec.zero_pad), "zero-pad", sink)
}

#[cfg(test)]
mod tests;
