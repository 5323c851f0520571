//! Guided-backpropagation saliency and result tables.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use candle_core::{Tensor, Var};
use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::backbone::{images_to_tensor, Activation, ForwardCtx, InputAdapter, ModelState};
use crate::dataset::ImageTensor;
use crate::error::{Error, Result};
use crate::evaluation::{EvalResult, Metrics};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SaliencyTarget {
    /// L2 norm of the embedding.
    #[default]
    EmbeddingNorm,
    /// One pre-softmax class score.
    Logit(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub model_id: String,
    pub input_ref: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Input gradient, `[channels, height, width]`.
    pub raw: Vec<f32>,
    /// Per-pixel maximum of `|raw|` over channels, scaled to `[0, 1]`.
    pub normalized: Vec<f32>,
}

const NORM_EPS: f64 = 1e-12;

/// Gradient of `scalar_fn(x)` with respect to `x`.
pub fn input_gradient(x: &Tensor, scalar_fn: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let var = Var::from_tensor(x)?;
    let s = scalar_fn(var.as_tensor())?;
    if s.elem_count() != 1 {
        return Err(Error::Shape("saliency target must be a scalar".into()));
    }
    let grads = s.backward()?;
    Ok(match grads.get(var.as_tensor()) {
        Some(g) => g.clone(),
        None => x.zeros_like()?,
    })
}

/// Guided backpropagation of `target` through `model` for one image.
pub fn guided_backprop(
    model: &ModelState,
    input: &ImageTensor,
    target: SaliencyTarget,
    adapter: InputAdapter,
    input_ref: &str,
) -> Result<SaliencyMap> {
    let x = images_to_tensor(&[input], adapter, model.device())?;
    let ctx = ForwardCtx {
        train: false,
        track_grad: false,
        activation: Activation::Guided,
    };
    let grad = input_gradient(&x, |x| {
        let out = model.forward(x, &ctx)?;
        match target {
            SaliencyTarget::EmbeddingNorm => {
                // d||e|| = (e / ||e||) de, and zero when e = 0
                let e = out.embedding;
                let norm = e.detach().sqr()?.sum_all()?.sqrt()?.to_scalar::<f32>()?;
                let dir = (e.detach() / f64::from(norm).max(NORM_EPS))?;
                Ok((e * dir)?.sum_all()?)
            }
            SaliencyTarget::Logit(c) => {
                let logits = out
                    .logits
                    .ok_or_else(|| Error::Config("model has no classifier for a logit target".into()))?;
                let n = logits.dim(1)?;
                if c >= n {
                    return Err(Error::Config(format!("logit {c} out of range for {n} classes")));
                }
                Ok(logits.narrow(1, c, 1)?.sum_all()?)
            }
        }
    })?;
    let (_, channels, height, width) = grad.dims4()?;
    let raw = grad.flatten_all()?.to_vec1::<f32>()?;
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence("non-finite saliency values".into()));
    }
    let plane = height * width;
    let mut normalized: Vec<f32> = (0..plane)
        .map(|i| (0..channels).map(|c| raw[c * plane + i].abs()).fold(0.0, f32::max))
        .collect();
    let max = normalized.iter().copied().fold(0.0, f32::max);
    if max > 0.0 {
        for v in &mut normalized {
            *v /= max;
        }
    }
    Ok(SaliencyMap {
        model_id: format!("{:016x}", model.checksum()?),
        input_ref: input_ref.to_string(),
        channels,
        height,
        width,
        raw,
        normalized,
    })
}

impl SaliencyMap {
    /// Writes `<stem>.png` (8-bit grey) and `<stem>.json` (raw values).
    pub fn export(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let img = GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.normalized[y as usize * self.width + x as usize];
            Luma([(v * 255.0).round().clamp(0.0, 255.0) as u8])
        });
        let png = dir.join(format!("{stem}.png"));
        img.save(&png).map_err(|e| Error::Image {
            path: png.display().to_string(),
            message: e.to_string(),
        })?;
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, serde_json::to_vec(self)?).map_err(|e| Error::io(&json, e))?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TableFormat {
    #[default]
    Markdown,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledResult {
    pub label: String,
    pub result: EvalResult,
}

/// `"mean ± std"` in percent with two decimals.
pub fn format_cell(mean: f64, std: f64) -> String {
    format!("{:.2} ± {:.2}", 100.0 * mean, 100.0 * std)
}

fn metric_columns(m: &Metrics) -> [f64; 4] {
    [m.rank1, m.rank5, m.rank10, m.map]
}

pub const TABLE_COLUMNS: [&str; 4] = ["Rank-1", "Rank-5", "Rank-10", "mAP"];

pub fn emit_results_table(rows: &[LabeledResult], format: TableFormat) -> String {
    let mut out = String::new();
    match format {
        TableFormat::Markdown => {
            out.push_str("| Method | Query / Gallery | Rank-1 | Rank-5 | Rank-10 | mAP |\n");
            out.push_str("|---|---|---|---|---|---|\n");
            for row in rows {
                let mean = metric_columns(&row.result.mean);
                let std = metric_columns(&row.result.std);
                let cells: Vec<String> = mean.iter().zip(&std).map(|(m, s)| format_cell(*m, *s)).collect();
                let _ = writeln!(out, "| {} | {} | {} |", row.label, row.result.direction, cells.join(" | "));
            }
        }
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header = vec!["method".to_string(), "direction".to_string()];
            for c in ["rank1", "rank5", "rank10", "map"] {
                header.push(format!("{c}_mean"));
                header.push(format!("{c}_std"));
            }
            w.write_record(&header).expect("in-memory write");
            for row in rows {
                let mut rec = vec![row.label.clone(), row.result.direction.label().to_string()];
                let mean = metric_columns(&row.result.mean);
                let std = metric_columns(&row.result.std);
                for (m, s) in mean.iter().zip(&std) {
                    rec.push(format!("{:.2}", 100.0 * m));
                    rec.push(format!("{:.2}", 100.0 * s));
                }
                w.write_record(&rec).expect("in-memory write");
            }
            out = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields");
        }
    }
    out
}
