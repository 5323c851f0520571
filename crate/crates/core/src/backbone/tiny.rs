//! Small residual network for 256x128 inputs.
//!
//! stem: 8x8 stride-8 patch projection (32x16 grid, 16 channels)
//! stage k: 3x3 stride-2 conv -> relu -> 3x3 conv + skip -> relu
//! widths 16 -> 24 -> 32 -> 48 -> 64, then global average pooling.

use candle_core::Tensor;

use super::{ForwardCtx, InitRule, ModelState, ParamSpec};
use crate::error::Result;

pub(crate) const PATCH: usize = 8;
const STEM_WIDTH: usize = 16;
const WIDTHS: [usize; 4] = [24, 32, 48, 64];
const STAGE_NAMES: [&str; 4] = ["stage1", "stage2", "stage3", "stage4"];

pub(crate) fn specs(in_channels: usize) -> (Vec<ParamSpec>, usize) {
    let mut specs = vec![ParamSpec::weight(
        "stem.weight",
        &[STEM_WIDTH, in_channels, PATCH, PATCH],
        "stem",
        InitRule::HeNormal(in_channels * PATCH * PATCH),
    )];
    let mut prev = STEM_WIDTH;
    for (stage, &w) in STAGE_NAMES.iter().zip(&WIDTHS) {
        specs.push(ParamSpec::weight(
            format!("{stage}.conv_a.weight"),
            &[w, prev, 3, 3],
            stage,
            InitRule::HeNormal(prev * 9),
        ));
        specs.push(ParamSpec::weight(
            format!("{stage}.conv_b.weight"),
            &[w, w, 3, 3],
            stage,
            InitRule::HeNormal(w * 9),
        ));
        prev = w;
    }
    (specs, prev)
}

/// Non-overlapping patch projection written as a single matrix product.
pub(crate) fn patchify(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let out = weight.dim(0)?;
    let (gh, gw) = (h / PATCH, w / PATCH);
    let cols = x
        .reshape((n, c, gh, PATCH, gw, PATCH))?
        .permute((0, 2, 4, 1, 3, 5))?
        .contiguous()?
        .reshape((n * gh * gw, c * PATCH * PATCH))?;
    let wmat = weight.reshape((out, c * PATCH * PATCH))?;
    Ok(cols
        .matmul(&wmat.t()?)?
        .reshape((n, gh, gw, out))?
        .permute((0, 3, 1, 2))?
        .contiguous()?)
}

pub(crate) fn features(model: &ModelState, x: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
    let mut h = ctx.act(&patchify(x, &model.p("stem.weight", ctx))?)?;
    for stage in STAGE_NAMES {
        let a = ctx.act(&h.conv2d(&model.p(&format!("{stage}.conv_a.weight"), ctx), 1, 2, 1, 1)?)?;
        let b = a.conv2d(&model.p(&format!("{stage}.conv_b.weight"), ctx), 1, 1, 1, 1)?;
        h = ctx.act(&(b + a)?)?;
    }
    Ok(h.mean((2, 3))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn patchify_matches_strided_convolution() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f32, 1.0, (2, 3, 16, 24), &dev).unwrap();
        let w = Tensor::randn(0f32, 1.0, (5, 3, PATCH, PATCH), &dev).unwrap();
        let a = patchify(&x, &w).unwrap();
        let b = x.conv2d(&w, 0, PATCH, 1, 1).unwrap();
        assert_eq!(a.dims(), b.dims());
        let diff = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff < 1e-3, "max abs diff {diff}");
    }
}
