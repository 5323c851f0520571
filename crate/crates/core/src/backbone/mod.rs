//! Feature extractors with a stage taxonomy, embedding heads, and the weight
//! copy / stage-freezing machinery used by cross-modal distillation.

mod checkpoint;
mod guided;
mod resnet;
mod tiny;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{ChannelStats, ImageTensor, Modality};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::seed;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use guided::GuidedRelu;

/// Stage names in topological order.
pub const STAGES: [&str; 6] = ["stem", "stage1", "stage2", "stage3", "stage4", "head"];

/// Environment variable naming a directory with `resnet18.safetensors` /
/// `resnet50.safetensors` (torchvision parameter names).
pub const PRETRAINED_DIR_ENV: &str = "XMREID_PRETRAINED_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Variant {
    /// Resnet18-class.
    Shallow,
    /// Resnet50-class.
    Deep,
    /// Four-stage desk-scale network (~130k parameters).
    Tiny,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Shallow => "SHALLOW",
            Variant::Deep => "DEEP",
            Variant::Tiny => "TINY",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SHALLOW" | "RESNET18" => Ok(Variant::Shallow),
            "DEEP" | "RESNET50" => Ok(Variant::Deep),
            "TINY" => Ok(Variant::Tiny),
            other => Err(Error::Config(format!("unknown backbone variant `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HeadKind {
    /// The embedding is the layer before the classifier.
    Preliminary,
    /// The embedding is the classifier output `W F(x) + b` (pre-softmax).
    ClassificationLayer,
}

pub const SWEEP_EMBEDDING_DIMS: [usize; 6] = [32, 128, 256, 512, 1024, 2048];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub kind: HeadKind,
    pub embedding_dim: usize,
    /// Present when a softmax classifier is attached.
    pub n_classes: Option<usize>,
    /// Width of the layer feeding the classifier. Equals `embedding_dim` for
    /// preliminary heads.
    pub preliminary_dim: usize,
}

impl HeadConfig {
    pub fn preliminary(embedding_dim: usize, n_classes: Option<usize>) -> Self {
        Self {
            kind: HeadKind::Preliminary,
            embedding_dim,
            n_classes,
            preliminary_dim: embedding_dim,
        }
    }

    pub fn classification_layer(n_classes: usize, preliminary_dim: usize) -> Self {
        Self {
            kind: HeadKind::ClassificationLayer,
            embedding_dim: n_classes,
            n_classes: Some(n_classes),
            preliminary_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.preliminary_dim == 0 {
            return Err(Error::Config("embedding widths must be positive".into()));
        }
        if self.n_classes == Some(0) {
            return Err(Error::Config("n_classes must be positive".into()));
        }
        match self.kind {
            HeadKind::ClassificationLayer if self.n_classes != Some(self.embedding_dim) => {
                Err(Error::Config(format!(
                    "classification-layer embedding width {} must equal n_classes {:?}",
                    self.embedding_dim, self.n_classes
                )))
            }
            HeadKind::Preliminary if self.preliminary_dim != self.embedding_dim => Err(Error::Config(
                "preliminary head must embed at its own width".into(),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Init {
    Random,
    /// Weights from `$XMREID_PRETRAINED_DIR` or an explicit file.
    Pretrained(Option<PathBuf>),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub params: Vec<String>,
}

/// Ordered partition of the trainable parameters into named stages.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTaxonomy {
    pub stages: Vec<Stage>,
}

impl StageTaxonomy {
    pub fn position(&self, stage: &str) -> Option<usize> {
        self.stages.iter().position(|s| s.name == stage)
    }

    pub fn stage_of(&self, param: &str) -> Option<&str> {
        self.stages
            .iter()
            .find(|s| s.params.iter().any(|p| p == param))
            .map(|s| s.name.as_str())
    }

    pub fn params_from(&self, stage: &str) -> Result<BTreeSet<String>> {
        let pos = self
            .position(stage)
            .ok_or_else(|| Error::Config(format!("unknown stage `{stage}`; expected one of {STAGES:?}")))?;
        Ok(self.stages[pos..]
            .iter()
            .flat_map(|s| s.params.iter().cloned())
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum ParamKind {
    Trainable,
    Buffer,
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum InitRule {
    /// He normal with the given fan.
    HeNormal(usize),
    /// Uniform in `+-1/sqrt(fan_in)`.
    Uniform(usize),
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub stage: &'static str,
    pub rule: InitRule,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub(crate) fn weight(name: impl Into<String>, shape: &[usize], stage: &'static str, rule: InitRule) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            stage,
            rule,
            kind: ParamKind::Trainable,
        }
    }

    pub(crate) fn buffer(name: impl Into<String>, shape: &[usize], stage: &'static str, rule: InitRule) -> Self {
        Self {
            kind: ParamKind::Buffer,
            ..Self::weight(name, shape, stage, rule)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Activation {
    #[default]
    Relu,
    /// Rectifier whose backward pass also drops negative upstream gradients.
    Guided,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardCtx {
    /// Batch statistics (and running-stat updates) for normalisation layers
    /// of trainable stages.
    pub train: bool,
    /// Record the autograd graph through the parameters.
    pub track_grad: bool,
    pub activation: Activation,
}

impl ForwardCtx {
    pub const TRAIN: ForwardCtx = ForwardCtx {
        train: true,
        track_grad: true,
        activation: Activation::Relu,
    };
    pub const EVAL: ForwardCtx = ForwardCtx {
        train: false,
        track_grad: false,
        activation: Activation::Relu,
    };

    pub(crate) fn act(&self, x: &Tensor) -> Result<Tensor> {
        Ok(match self.activation {
            Activation::Relu => x.relu()?,
            Activation::Guided => x.contiguous()?.apply_op1(GuidedRelu)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub embedding: Tensor,
    /// Classifier logits, when a classifier is attached. For
    /// classification-layer heads this is the same tensor as `embedding`.
    pub logits: Option<Tensor>,
}

/// Backbone weights plus head, freeze mask and stage taxonomy.
///
/// `Clone` performs a deep copy of every tensor.
#[derive(Debug)]
pub struct ModelState {
    variant: Variant,
    in_channels: usize,
    head: HeadConfig,
    taxonomy: StageTaxonomy,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    freeze_mask: BTreeSet<String>,
    device: Device,
}

fn deep_var(v: &Var) -> Var {
    Var::from_tensor(&v.as_tensor().copy().expect("cpu copy")).expect("cpu var")
}

impl Clone for ModelState {
    fn clone(&self) -> Self {
        Self {
            variant: self.variant,
            in_channels: self.in_channels,
            head: self.head.clone(),
            taxonomy: self.taxonomy.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), deep_var(v))).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), deep_var(v))).collect(),
            freeze_mask: self.freeze_mask.clone(),
            device: self.device.clone(),
        }
    }
}

fn param_specs(variant: Variant, in_channels: usize, head: &HeadConfig) -> Vec<ParamSpec> {
    let (mut specs, features) = match variant {
        Variant::Tiny => tiny::specs(in_channels),
        Variant::Shallow => resnet::specs(resnet::Depth::R18, in_channels),
        Variant::Deep => resnet::specs(resnet::Depth::R50, in_channels),
    };
    let m = head.preliminary_dim;
    specs.push(ParamSpec::weight("head.embed.weight", &[m, features], "head", InitRule::Uniform(features)));
    specs.push(ParamSpec::weight("head.embed.bias", &[m], "head", InitRule::Uniform(features)));
    if let Some(c) = head.n_classes {
        specs.push(ParamSpec::weight("head.classifier.weight", &[c, m], "head", InitRule::Uniform(m)));
        specs.push(ParamSpec::weight("head.classifier.bias", &[c], "head", InitRule::Uniform(m)));
    }
    specs
}

fn init_tensor(spec: &ParamSpec, seed_value: u64, device: &Device) -> Result<Tensor> {
    let n: usize = spec.shape.iter().product();
    let mut rng = seed::rng_for(seed_value, &spec.name, &[]);
    let data: Vec<f32> = match spec.rule {
        InitRule::Zeros => vec![0.0; n],
        InitRule::Ones => vec![1.0; n],
        InitRule::HeNormal(fan) => {
            let normal = Normal::new(0.0f32, (2.0 / fan as f32).sqrt()).map_err(|e| Error::Config(e.to_string()))?;
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        }
        InitRule::Uniform(fan) => {
            let bound = 1.0 / (fan as f32).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        }
    };
    Ok(Tensor::from_vec(data, spec.shape.as_slice(), device)?)
}

/// Builds a model with three input channels.
pub fn build_backbone(variant: Variant, head: HeadConfig, init: Init, seed_value: u64) -> Result<ModelState> {
    build_backbone_with_channels(variant, 3, head, init, seed_value)
}

pub fn build_backbone_with_channels(
    variant: Variant,
    in_channels: usize,
    head: HeadConfig,
    init: Init,
    seed_value: u64,
) -> Result<ModelState> {
    head.validate()?;
    if in_channels == 0 {
        return Err(Error::Config("in_channels must be positive".into()));
    }
    let device = Device::Cpu;
    let specs = param_specs(variant, in_channels, &head);
    let pretrained = match &init {
        Init::Random => None,
        Init::Pretrained(path) => Some(resnet::load_pretrained(variant, path.as_deref(), &device)?),
    };

    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    let mut stages: Vec<Stage> = STAGES
        .iter()
        .map(|s| Stage {
            name: s.to_string(),
            params: Vec::new(),
        })
        .collect();
    for spec in &specs {
        let loaded = match &pretrained {
            Some(weights) if spec.stage != "head" => Some(resnet::adapt_pretrained(weights, spec)?),
            _ => None,
        };
        let tensor = match loaded {
            Some(t) => t,
            None => init_tensor(spec, seed_value, &device)?,
        };
        let var = Var::from_tensor(&tensor)?;
        match spec.kind {
            ParamKind::Trainable => {
                stages
                    .iter_mut()
                    .find(|s| s.name == spec.stage)
                    .expect("known stage")
                    .params
                    .push(spec.name.clone());
                params.insert(spec.name.clone(), var);
            }
            ParamKind::Buffer => {
                buffers.insert(spec.name.clone(), var);
            }
        }
    }
    Ok(ModelState {
        variant,
        in_channels,
        head,
        taxonomy: StageTaxonomy { stages },
        params,
        buffers,
        freeze_mask: BTreeSet::new(),
        device,
    })
}

impl ModelState {
    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn head(&self) -> &HeadConfig {
        &self.head
    }

    pub fn taxonomy(&self) -> &StageTaxonomy {
        &self.taxonomy
    }

    pub fn freeze_mask(&self) -> &BTreeSet<String> {
        &self.freeze_mask
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn embedding_dim(&self) -> usize {
        self.head.embedding_dim
    }

    pub fn parameter_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    pub fn parameter(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|v| v.as_tensor())
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name).map(|v| v.as_tensor())
    }

    pub(crate) fn buffer_var(&self, name: &str) -> &Var {
        &self.buffers[name]
    }

    pub(crate) fn buffer_names(&self) -> impl Iterator<Item = &str> {
        self.buffers.keys().map(String::as_str)
    }

    /// Overwrites a parameter or buffer in place.
    pub fn set_tensor(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .params
            .get(name)
            .or_else(|| self.buffers.get(name))
            .ok_or_else(|| Error::Config(format!("no parameter named `{name}`")))?;
        var.set(&value.to_dtype(DType::F32)?)?;
        Ok(())
    }

    pub(crate) fn from_parts(
        variant: Variant,
        in_channels: usize,
        head: HeadConfig,
        taxonomy: StageTaxonomy,
        params: BTreeMap<String, Tensor>,
        buffers: BTreeMap<String, Tensor>,
        freeze_mask: BTreeSet<String>,
    ) -> Result<Self> {
        let expected = param_specs(variant, in_channels, &head);
        for spec in &expected {
            let t = match spec.kind {
                ParamKind::Trainable => params.get(&spec.name),
                ParamKind::Buffer => buffers.get(&spec.name),
            }
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", spec.name)))?;
            if t.dims() != spec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    spec.name,
                    t.dims(),
                    spec.shape
                )));
            }
        }
        let to_vars = |m: BTreeMap<String, Tensor>| -> Result<BTreeMap<String, Var>> {
            m.into_iter().map(|(k, t)| Ok((k, Var::from_tensor(&t)?))).collect()
        };
        let state = Self {
            variant,
            in_channels,
            head,
            taxonomy,
            params: to_vars(params)?,
            buffers: to_vars(buffers)?,
            freeze_mask,
            device: Device::Cpu,
        };
        if let Some(bad) = state.freeze_mask.iter().find(|n| !state.params.contains_key(*n)) {
            return Err(Error::Checkpoint(format!("freeze mask names unknown parameter `{bad}`")));
        }
        Ok(state)
    }

    /// Parameter tensor for use in a forward pass.
    pub(crate) fn p(&self, name: &str, ctx: &ForwardCtx) -> Tensor {
        let v = &self.params[name];
        if ctx.track_grad && !self.freeze_mask.contains(name) {
            v.as_tensor().clone()
        } else {
            v.as_detached_tensor()
        }
    }

    pub(crate) fn stage_trainable(&self, stage: &str) -> bool {
        self.taxonomy
            .stages
            .iter()
            .find(|s| s.name == stage)
            .is_some_and(|s| s.params.iter().any(|p| !self.freeze_mask.contains(p)))
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        self.params
            .iter()
            .filter(|(k, _)| !self.freeze_mask.contains(*k))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn forward(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<ForwardOutput> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "model expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        if self.variant == Variant::Tiny && (h != ImageTensor::HEIGHT || w != ImageTensor::WIDTH) {
            return Err(Error::Shape(format!(
                "TINY expects {}x{} inputs, got {h}x{w}",
                ImageTensor::HEIGHT,
                ImageTensor::WIDTH
            )));
        }
        let features = match self.variant {
            Variant::Tiny => tiny::features(self, x, ctx)?,
            Variant::Shallow => resnet::features(self, resnet::Depth::R18, x, ctx)?,
            Variant::Deep => resnet::features(self, resnet::Depth::R50, x, ctx)?,
        };
        let pre = features
            .broadcast_matmul(&self.p("head.embed.weight", ctx).t()?)?
            .broadcast_add(&self.p("head.embed.bias", ctx))?;
        let logits = match self.head.n_classes {
            Some(_) => Some(
                pre.broadcast_matmul(&self.p("head.classifier.weight", ctx).t()?)?
                    .broadcast_add(&self.p("head.classifier.bias", ctx))?,
            ),
            None => None,
        };
        let embedding = match self.head.kind {
            HeadKind::Preliminary => pre,
            HeadKind::ClassificationLayer => logits.clone().expect("validated head has classes"),
        };
        Ok(ForwardOutput { embedding, logits })
    }

    /// Freezes `first_frozen_stage` and every later stage, including the head.
    pub fn freeze_from(&mut self, first_frozen_stage: &str) -> Result<()> {
        self.freeze_mask = self.taxonomy.params_from(first_frozen_stage)?;
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        self.freeze_mask = self.params.keys().cloned().collect();
    }

    pub fn unfreeze_all(&mut self) {
        self.freeze_mask.clear();
    }

    fn check_compatible(&self, other: &ModelState) -> Result<()> {
        if self.variant != other.variant
            || self.in_channels != other.in_channels
            || self.head != other.head
            || self.taxonomy != other.taxonomy
        {
            return Err(Error::Architecture(format!(
                "{} ({} ch, {:?}) vs {} ({} ch, {:?})",
                self.variant, self.in_channels, self.head, other.variant, other.in_channels, other.head
            )));
        }
        Ok(())
    }

    /// Overwrites every parameter and buffer with the values of `src`. The
    /// freeze mask is left unchanged.
    pub fn copy_from(&mut self, src: &ModelState) -> Result<()> {
        self.check_compatible(src)?;
        for (name, var) in self.params.iter().chain(self.buffers.iter()) {
            let value = src
                .params
                .get(name)
                .or_else(|| src.buffers.get(name))
                .expect("compatible models share names");
            var.set(&value.as_tensor().copy()?)?;
        }
        Ok(())
    }

    /// FNV-1a over the bit patterns of the given parameters, in name order.
    pub fn checksum_of<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> Result<u64> {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut names: Vec<&str> = names.into_iter().collect();
        names.sort_unstable();
        for name in names {
            let t = self
                .params
                .get(name)
                .or_else(|| self.buffers.get(name))
                .ok_or_else(|| Error::Config(format!("no parameter named `{name}`")))?;
            for b in name.bytes() {
                h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3);
            }
            for v in t.flatten_all()?.to_vec1::<f32>()? {
                for b in v.to_bits().to_le_bytes() {
                    h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3);
                }
            }
        }
        Ok(h)
    }

    pub fn checksum(&self) -> Result<u64> {
        let names: Vec<&str> = self.params.keys().chain(self.buffers.keys()).map(String::as_str).collect();
        self.checksum_of(names)
    }

    pub fn stage_checksums(&self) -> Result<BTreeMap<String, u64>> {
        self.taxonomy
            .stages
            .iter()
            .map(|s| Ok((s.name.clone(), self.checksum_of(s.params.iter().map(String::as_str))?)))
            .collect()
    }
}

/// Copies `src` into `dst` and returns it.
pub fn copy_weights(src: &ModelState, mut dst: ModelState) -> Result<ModelState> {
    dst.copy_from(src)?;
    Ok(dst)
}

pub fn freeze_from_stage(mut model: ModelState, first_frozen_stage: &str) -> Result<ModelState> {
    model.freeze_from(first_frozen_stage)?;
    Ok(model)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ZeroPadMode {
    /// RGB in channels 0-2, depth in channel 3.
    #[default]
    FourChannel,
    /// Grey-level RGB in channel 0, depth in channel 1.
    Gray,
}

impl ZeroPadMode {
    pub fn channels(self) -> usize {
        match self {
            ZeroPadMode::FourChannel => 4,
            ZeroPadMode::Gray => 2,
        }
    }
}

/// Places the image in its modality's channel slots and zero-fills the slots
/// of the other modality.
pub fn zero_pad_input(image: &ImageTensor, mode: ZeroPadMode) -> Result<ImageTensor> {
    if image.channels != 3 {
        return Err(Error::Shape(format!(
            "zero padding expects a 3-channel tensor, got {}",
            image.channels
        )));
    }
    let plane = ImageTensor::HEIGHT * ImageTensor::WIDTH;
    let zeros = vec![0f32; plane];
    let planes: Vec<&[f32]> = match (mode, image.modality) {
        (ZeroPadMode::FourChannel, Modality::Rgb) => {
            vec![image.plane(0), image.plane(1), image.plane(2), &zeros]
        }
        (ZeroPadMode::FourChannel, Modality::Depth) => vec![&zeros, &zeros, &zeros, image.plane(0)],
        (ZeroPadMode::Gray, Modality::Rgb) => {
            let gray: Vec<f32> = (0..plane)
                .map(|i| (image.plane(0)[i] + image.plane(1)[i] + image.plane(2)[i]) / 3.0)
                .collect();
            return Ok(ImageTensor {
                data: [gray.as_slice(), &zeros].concat(),
                channels: 2,
                modality: image.modality,
                normalization: ChannelStats::identity(2),
            });
        }
        (ZeroPadMode::Gray, Modality::Depth) => vec![&zeros, image.plane(0)],
    };
    let channels = planes.len();
    Ok(ImageTensor {
        data: planes.concat(),
        channels,
        modality: image.modality,
        normalization: ChannelStats::identity(channels),
    })
}

/// How image tensors are turned into network inputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputAdapter {
    #[default]
    Identity,
    ZeroPad(ZeroPadMode),
}

impl InputAdapter {
    pub fn in_channels(self) -> usize {
        match self {
            InputAdapter::Identity => 3,
            InputAdapter::ZeroPad(m) => m.channels(),
        }
    }
}

/// Stacks images into an `[N, C, 256, 128]` tensor.
pub fn images_to_tensor(images: &[&ImageTensor], adapter: InputAdapter, device: &Device) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    let channels = adapter.in_channels();
    let per = channels * ImageTensor::HEIGHT * ImageTensor::WIDTH;
    let mut data = Vec::with_capacity(per * images.len());
    for img in images {
        match adapter {
            InputAdapter::Identity => {
                if img.channels != 3 {
                    return Err(Error::Shape(format!("expected 3 channels, got {}", img.channels)));
                }
                data.extend_from_slice(&img.data);
            }
            InputAdapter::ZeroPad(mode) => data.extend_from_slice(&zero_pad_input(img, mode)?.data),
        }
    }
    Ok(Tensor::from_vec(
        data,
        (images.len(), channels, ImageTensor::HEIGHT, ImageTensor::WIDTH),
        device,
    )?)
}

/// Embeds a batch in evaluation mode. Row `i` belongs to `batch[i]`.
pub fn forward_embed(model: &ModelState, batch: &[&ImageTensor], adapter: InputAdapter) -> Result<EmbeddingMatrix> {
    if batch.is_empty() {
        return Err(Error::Precondition("forward_embed needs a nonempty batch".into()));
    }
    if adapter.in_channels() != model.in_channels() {
        return Err(Error::Shape(format!(
            "adapter produces {} channels but the model expects {}",
            adapter.in_channels(),
            model.in_channels()
        )));
    }
    let x = images_to_tensor(batch, adapter, model.device())?;
    let out = model.forward(&x, &ForwardCtx::EVAL)?;
    EmbeddingMatrix::from_tensor(&out.embedding)
}

/// Embeds many images in chunks of `chunk` rows.
pub fn embed_all(
    model: &ModelState,
    images: &[&ImageTensor],
    adapter: InputAdapter,
    chunk: usize,
) -> Result<EmbeddingMatrix> {
    let parts = images
        .chunks(chunk.max(1))
        .map(|c| forward_embed(model, c, adapter))
        .collect::<Result<Vec<_>>>()?;
    EmbeddingMatrix::concat(&parts)
}

#[cfg(test)]
mod tests;
