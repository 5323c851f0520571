//! Resnet18 / Resnet50 feature extractors with torchvision parameter names.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};

use super::{ForwardCtx, InitRule, ModelState, ParamSpec, Variant, PRETRAINED_DIR_ENV};
use crate::error::{Error, Result};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Depth {
    R18,
    R50,
}

impl Depth {
    fn blocks(self) -> [usize; 4] {
        match self {
            Depth::R18 => [2, 2, 2, 2],
            Depth::R50 => [3, 4, 6, 3],
        }
    }

    fn expansion(self) -> usize {
        match self {
            Depth::R18 => 1,
            Depth::R50 => 4,
        }
    }
}

const LAYER_STAGES: [&str; 4] = ["stage1", "stage2", "stage3", "stage4"];
const LAYER_WIDTHS: [usize; 4] = [64, 128, 256, 512];

fn push_conv(specs: &mut Vec<ParamSpec>, name: &str, shape: [usize; 4], stage: &'static str) {
    // torchvision uses fan_out for conv layers
    let fan_out = shape[0] * shape[2] * shape[3];
    specs.push(ParamSpec::weight(format!("{name}.weight"), &shape, stage, InitRule::HeNormal(fan_out)));
}

fn push_bn(specs: &mut Vec<ParamSpec>, name: &str, c: usize, stage: &'static str) {
    specs.push(ParamSpec::weight(format!("{name}.weight"), &[c], stage, InitRule::Ones));
    specs.push(ParamSpec::weight(format!("{name}.bias"), &[c], stage, InitRule::Zeros));
    specs.push(ParamSpec::buffer(format!("{name}.running_mean"), &[c], stage, InitRule::Zeros));
    specs.push(ParamSpec::buffer(format!("{name}.running_var"), &[c], stage, InitRule::Ones));
}

pub(crate) fn specs(depth: Depth, in_channels: usize) -> (Vec<ParamSpec>, usize) {
    let mut specs = Vec::new();
    push_conv(&mut specs, "conv1", [64, in_channels, 7, 7], "stem");
    push_bn(&mut specs, "bn1", 64, "stem");
    let mut inplanes = 64;
    for (l, (&stage, &width)) in LAYER_STAGES.iter().zip(&LAYER_WIDTHS).enumerate() {
        for b in 0..depth.blocks()[l] {
            let p = format!("layer{}.{b}", l + 1);
            let out = width * depth.expansion();
            match depth {
                Depth::R18 => {
                    push_conv(&mut specs, &format!("{p}.conv1"), [width, inplanes, 3, 3], stage);
                    push_bn(&mut specs, &format!("{p}.bn1"), width, stage);
                    push_conv(&mut specs, &format!("{p}.conv2"), [width, width, 3, 3], stage);
                    push_bn(&mut specs, &format!("{p}.bn2"), width, stage);
                }
                Depth::R50 => {
                    push_conv(&mut specs, &format!("{p}.conv1"), [width, inplanes, 1, 1], stage);
                    push_bn(&mut specs, &format!("{p}.bn1"), width, stage);
                    push_conv(&mut specs, &format!("{p}.conv2"), [width, width, 3, 3], stage);
                    push_bn(&mut specs, &format!("{p}.bn2"), width, stage);
                    push_conv(&mut specs, &format!("{p}.conv3"), [out, width, 1, 1], stage);
                    push_bn(&mut specs, &format!("{p}.bn3"), out, stage);
                }
            }
            let stride = if b == 0 && l > 0 { 2 } else { 1 };
            if b == 0 && (stride != 1 || inplanes != out) {
                push_conv(&mut specs, &format!("{p}.downsample.0"), [out, inplanes, 1, 1], stage);
                push_bn(&mut specs, &format!("{p}.downsample.1"), out, stage);
            }
            inplanes = out;
        }
    }
    (specs, inplanes)
}

fn batch_norm(model: &ModelState, name: &str, stage: &str, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
    let c = x.dim(1)?;
    let w = model.p(&format!("{name}.weight"), ctx).reshape((1, c, 1, 1))?;
    let b = model.p(&format!("{name}.bias"), ctx).reshape((1, c, 1, 1))?;
    let rm_var = model.buffer_var(&format!("{name}.running_mean"));
    let rv_var = model.buffer_var(&format!("{name}.running_var"));
    let (mean, var) = if ctx.train && model.stage_trainable(stage) {
        let (n, _, h, wd) = x.dims4()?;
        let count = (n * h * wd) as f64;
        let mean = x.mean_keepdim((0, 2, 3))?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
        let unbiased = (var.detach().flatten_all()? * (count / (count - 1.0).max(1.0)))?;
        let rm = ((rm_var.as_tensor() * (1.0 - BN_MOMENTUM))? + (mean.detach().flatten_all()? * BN_MOMENTUM)?)?;
        let rv = ((rv_var.as_tensor() * (1.0 - BN_MOMENTUM))? + (unbiased * BN_MOMENTUM)?)?;
        rm_var.set(&rm)?;
        rv_var.set(&rv)?;
        (mean, var)
    } else {
        (
            rm_var.as_detached_tensor().reshape((1, c, 1, 1))?,
            rv_var.as_detached_tensor().reshape((1, c, 1, 1))?,
        )
    };
    let xhat = x.broadcast_sub(&mean)?.broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
    Ok(xhat.broadcast_mul(&w)?.broadcast_add(&b)?)
}

fn conv(model: &ModelState, name: &str, x: &Tensor, padding: usize, stride: usize, ctx: &ForwardCtx) -> Result<Tensor> {
    Ok(x.conv2d(&model.p(&format!("{name}.weight"), ctx), padding, stride, 1, 1)?)
}

pub(crate) fn features(model: &ModelState, depth: Depth, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
    let h = conv(model, "conv1", x, 3, 2, ctx)?;
    let h = ctx.act(&batch_norm(model, "bn1", "stem", &h, ctx)?)?;
    // inputs are non-negative after the rectifier, so zero padding is exact
    let mut h = h
        .pad_with_zeros(2, 1, 1)?
        .pad_with_zeros(3, 1, 1)?
        .max_pool2d_with_stride(3, 2)?;
    for (l, &stage) in LAYER_STAGES.iter().enumerate() {
        for b in 0..depth.blocks()[l] {
            let p = format!("layer{}.{b}", l + 1);
            let stride = if b == 0 && l > 0 { 2 } else { 1 };
            let out = match depth {
                Depth::R18 => {
                    let y = conv(model, &format!("{p}.conv1"), &h, 1, stride, ctx)?;
                    let y = ctx.act(&batch_norm(model, &format!("{p}.bn1"), stage, &y, ctx)?)?;
                    let y = conv(model, &format!("{p}.conv2"), &y, 1, 1, ctx)?;
                    batch_norm(model, &format!("{p}.bn2"), stage, &y, ctx)?
                }
                Depth::R50 => {
                    let y = conv(model, &format!("{p}.conv1"), &h, 0, 1, ctx)?;
                    let y = ctx.act(&batch_norm(model, &format!("{p}.bn1"), stage, &y, ctx)?)?;
                    let y = conv(model, &format!("{p}.conv2"), &y, 1, stride, ctx)?;
                    let y = ctx.act(&batch_norm(model, &format!("{p}.bn2"), stage, &y, ctx)?)?;
                    let y = conv(model, &format!("{p}.conv3"), &y, 0, 1, ctx)?;
                    batch_norm(model, &format!("{p}.bn3"), stage, &y, ctx)?
                }
            };
            let skip = if model.parameter(&format!("{p}.downsample.0.weight")).is_some() {
                let s = conv(model, &format!("{p}.downsample.0"), &h, 0, stride, ctx)?;
                batch_norm(model, &format!("{p}.downsample.1"), stage, &s, ctx)?
            } else {
                h.clone()
            };
            h = ctx.act(&(out + skip)?)?;
        }
    }
    Ok(h.mean((2, 3))?)
}

fn file_name(variant: Variant) -> &'static str {
    match variant {
        Variant::Shallow => "resnet18.safetensors",
        _ => "resnet50.safetensors",
    }
}

pub(crate) fn load_pretrained(
    variant: Variant,
    explicit: Option<&Path>,
    device: &Device,
) -> Result<HashMap<String, Tensor>> {
    if variant == Variant::Tiny {
        return Err(Error::PretrainedUnavailable {
            variant: variant.to_string(),
            remedy: "TINY has no pretrained weights; use RANDOM initialisation".into(),
        });
    }
    let path: PathBuf = match explicit {
        Some(p) => p.to_path_buf(),
        None => match std::env::var_os(PRETRAINED_DIR_ENV) {
            Some(dir) => PathBuf::from(dir).join(file_name(variant)),
            None => {
                return Err(Error::PretrainedUnavailable {
                    variant: variant.to_string(),
                    remedy: format!(
                        "set {PRETRAINED_DIR_ENV} to a directory containing {} \
                         (torchvision ImageNet weights converted to safetensors)",
                        file_name(variant)
                    ),
                })
            }
        },
    };
    if !path.is_file() {
        return Err(Error::PretrainedUnavailable {
            variant: variant.to_string(),
            remedy: format!("expected weights at {}", path.display()),
        });
    }
    let weights = candle_core::safetensors::load(&path, device)?;
    weights
        .into_iter()
        .map(|(k, t)| Ok((k, t.to_dtype(DType::F32)?)))
        .collect()
}

/// Fetches one pretrained tensor, widening the first convolution for inputs
/// that are not three-channel RGB.
pub(crate) fn adapt_pretrained(weights: &HashMap<String, Tensor>, spec: &ParamSpec) -> Result<Tensor> {
    let t = weights
        .get(&spec.name)
        .ok_or_else(|| Error::Checkpoint(format!("pretrained file lacks `{}`", spec.name)))?;
    if spec.name == "conv1.weight" && t.dims() != spec.shape.as_slice() {
        let rgb_mean = t.mean_keepdim(1)?;
        let widened = match spec.shape[1] {
            4 => Tensor::cat(&[t, &rgb_mean], 1)?,
            2 => Tensor::cat(&[&t.sum_keepdim(1)?, &rgb_mean], 1)?,
            1 => t.sum_keepdim(1)?,
            c => {
                return Err(Error::Architecture(format!(
                    "cannot adapt pretrained stem to {c} input channels"
                )))
            }
        };
        return Ok(widened);
    }
    if t.dims() != spec.shape.as_slice() {
        return Err(Error::Architecture(format!(
            "pretrained `{}` has shape {:?}, expected {:?}",
            spec.name,
            t.dims(),
            spec.shape
        )));
    }
    Ok(t.clone())
}
