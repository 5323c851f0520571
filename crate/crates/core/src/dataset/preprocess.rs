use image::imageops::{self, FilterType};
use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use super::{BoundingBox, DatasetIndex, Modality, RawImage, Sample};
use crate::error::{Error, Result};

pub const INPUT_HEIGHT: usize = 256;
pub const INPUT_WIDTH: usize = 128;

/// Per-channel normalisation constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ChannelStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub rgb: ChannelStats,
    pub depth: ChannelStats,
}

impl Default for NormStats {
    fn default() -> Self {
        Self {
            rgb: ChannelStats::identity(3),
            depth: ChannelStats::identity(1),
        }
    }
}

impl NormStats {
    /// Mean and standard deviation of the raw pixels of every sample in
    /// `index`, separately per modality and channel.
    pub fn estimate(index: &DatasetIndex, margin: f32) -> Result<Self> {
        let mut acc = [(vec![0f64; 3], vec![0f64; 3], 0u64), (vec![0f64; 1], vec![0f64; 1], 0u64)];
        for s in index.samples() {
            let raw = load_cropped(s, margin)?;
            let slot = match s.modality {
                Modality::Rgb => 0,
                Modality::Depth => 1,
            };
            let raw = conform_channels(&raw, s.modality);
            let (sum, sq, n) = &mut acc[slot];
            for (c, (s1, s2)) in sum.iter_mut().zip(sq.iter_mut()).enumerate() {
                for &v in raw.plane(c) {
                    *s1 += f64::from(v);
                    *s2 += f64::from(v) * f64::from(v);
                }
            }
            *n += (raw.width * raw.height) as u64;
        }
        let finish = |(sum, sq, n): &(Vec<f64>, Vec<f64>, u64), channels: usize| {
            if *n == 0 {
                return ChannelStats::identity(channels);
            }
            let n = *n as f64;
            let mean: Vec<f32> = sum.iter().map(|s| (s / n) as f32).collect();
            let std = sum
                .iter()
                .zip(sq)
                .map(|(s, q)| {
                    let var = (q / n - (s / n).powi(2)).max(0.0);
                    let sd = var.sqrt() as f32;
                    if sd > 1e-6 {
                        sd
                    } else {
                        1.0
                    }
                })
                .collect();
            ChannelStats { mean, std }
        };
        Ok(Self {
            rgb: finish(&acc[0], 3),
            depth: finish(&acc[1], 1),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DepthEncoding {
    /// The single depth channel is copied into three identical channels.
    #[default]
    Replicate3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocPolicy {
    /// Fractional margin added on every side of a bounding box before cropping.
    pub margin: f32,
    pub stats: NormStats,
    pub depth_encoding: DepthEncoding,
}

impl Default for PreprocPolicy {
    fn default() -> Self {
        Self {
            margin: 0.10,
            stats: NormStats::default(),
            depth_encoding: DepthEncoding::Replicate3,
        }
    }
}

/// A normalised network input of shape `[channels, 256, 128]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub data: Vec<f32>,
    pub channels: usize,
    pub modality: Modality,
    pub normalization: ChannelStats,
}

impl ImageTensor {
    pub const HEIGHT: usize = INPUT_HEIGHT;
    pub const WIDTH: usize = INPUT_WIDTH;

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = Self::HEIGHT * Self::WIDTH;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, Self::HEIGHT, Self::WIDTH]
    }
}

fn conform_channels(raw: &RawImage, modality: Modality) -> RawImage {
    match (modality, raw.channels) {
        (Modality::Rgb, 3) | (Modality::Depth, 1) => raw.clone(),
        (Modality::Rgb, _) => {
            let p = raw.plane(0);
            RawImage {
                data: p.iter().chain(p).chain(p).copied().collect(),
                channels: 3,
                ..*raw
            }
        }
        (Modality::Depth, _) => RawImage {
            data: raw.plane(0).to_vec(),
            channels: 1,
            ..*raw
        },
    }
}

fn crop(raw: &RawImage, bbox: BoundingBox, margin: f32) -> RawImage {
    let mx = (bbox.width as f32 * margin).round() as i64;
    let my = (bbox.height as f32 * margin).round() as i64;
    let x0 = (i64::from(bbox.x) - mx).clamp(0, raw.width as i64 - 1) as usize;
    let y0 = (i64::from(bbox.y) - my).clamp(0, raw.height as i64 - 1) as usize;
    let x1 = (i64::from(bbox.x + bbox.width) + mx).clamp(x0 as i64 + 1, raw.width as i64) as usize;
    let y1 = (i64::from(bbox.y + bbox.height) + my).clamp(y0 as i64 + 1, raw.height as i64) as usize;
    let (w, h) = (x1 - x0, y1 - y0);
    let mut data = Vec::with_capacity(w * h * raw.channels);
    for c in 0..raw.channels {
        let p = raw.plane(c);
        for y in y0..y1 {
            data.extend_from_slice(&p[y * raw.width + x0..y * raw.width + x1]);
        }
    }
    RawImage {
        width: w,
        height: h,
        channels: raw.channels,
        data,
    }
}

fn load_cropped(sample: &Sample, margin: f32) -> Result<RawImage> {
    let raw = sample.source.load()?;
    Ok(match sample.bbox {
        Some(b) => crop(&raw, b, margin),
        None => (*raw).clone(),
    })
}

fn resize_plane(plane: &[f32], width: usize, height: usize) -> Vec<f32> {
    if width == INPUT_WIDTH && height == INPUT_HEIGHT {
        return plane.to_vec();
    }
    let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(width as u32, height as u32, plane.to_vec())
            .expect("plane length matches dimensions");
    imageops::resize(&buf, INPUT_WIDTH as u32, INPUT_HEIGHT as u32, FilterType::Triangle).into_raw()
}

/// Resizes `raw` to 256x128 and normalises it with the policy statistics of
/// its modality. Depth is replicated to three channels.
pub fn preprocess_image(raw: &RawImage, modality: Modality, policy: &PreprocPolicy) -> Result<ImageTensor> {
    if raw.width == 0 || raw.height == 0 || raw.data.len() != raw.width * raw.height * raw.channels {
        return Err(Error::Shape(format!(
            "undecodable image buffer {}x{}x{}",
            raw.channels, raw.height, raw.width
        )));
    }
    let raw = conform_channels(raw, modality);
    let stats = match modality {
        Modality::Rgb => &policy.stats.rgb,
        Modality::Depth => &policy.stats.depth,
    };
    let mut planes: Vec<Vec<f32>> = (0..raw.channels)
        .map(|c| {
            let (m, s) = (stats.mean[c], stats.std[c]);
            let mut p = resize_plane(raw.plane(c), raw.width, raw.height);
            for v in &mut p {
                *v = (*v - m) / s;
            }
            p
        })
        .collect();
    if modality == Modality::Depth {
        match policy.depth_encoding {
            DepthEncoding::Replicate3 => {
                let p = planes.remove(0);
                planes = vec![p.clone(), p.clone(), p];
            }
        }
    }
    let data: Vec<f32> = planes.concat();
    if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
        return Err(Error::Shape(format!("non-finite value {bad} after preprocessing")));
    }
    let normalization = match modality {
        Modality::Rgb => stats.clone(),
        Modality::Depth => ChannelStats {
            mean: vec![stats.mean[0]; 3],
            std: vec![stats.std[0]; 3],
        },
    };
    Ok(ImageTensor {
        channels: 3,
        data,
        modality,
        normalization,
    })
}

/// Loads, crops (when the sample carries a box) and preprocesses one sample.
pub fn preprocess_sample(sample: &Sample, policy: &PreprocPolicy) -> Result<ImageTensor> {
    let raw = load_cropped(sample, policy.margin)?;
    preprocess_image(&raw, sample.modality, policy)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn policy() -> PreprocPolicy {
        PreprocPolicy {
            stats: NormStats {
                rgb: ChannelStats {
                    mean: vec![0.5, 0.4, 0.3],
                    std: vec![0.25, 0.2, 0.1],
                },
                depth: ChannelStats {
                    mean: vec![2.0],
                    std: vec![0.5],
                },
            },
            ..PreprocPolicy::default()
        }
    }

    #[test]
    fn constant_rgb_maps_to_standardised_constants() {
        let raw = RawImage::filled(40, 90, &[0.7, 0.2, 0.9]);
        let t = preprocess_image(&raw, Modality::Rgb, &policy()).unwrap();
        assert_eq!(t.shape(), [3, 256, 128]);
        let expect = [(0.7 - 0.5) / 0.25, (0.2 - 0.4) / 0.2, (0.9 - 0.3) / 0.1];
        for (c, e) in expect.iter().enumerate() {
            for v in t.plane(c) {
                assert!((v - e).abs() < 1e-4, "channel {c}: {v} vs {e}");
            }
        }
    }

    #[test]
    fn depth_is_replicated_to_three_channels() {
        let data: Vec<f32> = (0..640 * 480).map(|i| 1.0 + (i % 977) as f32 / 500.0).collect();
        let raw = RawImage::new(640, 480, 1, data).unwrap();
        let t = preprocess_image(&raw, Modality::Depth, &policy()).unwrap();
        assert_eq!(t.shape(), [3, 256, 128]);
        assert_eq!(t.plane(0), t.plane(1));
        assert_eq!(t.plane(1), t.plane(2));
    }

    #[test]
    fn preprocessing_is_deterministic() {
        let data: Vec<f32> = (0..3 * 33 * 17).map(|i| ((i * 7919) % 101) as f32 / 101.0).collect();
        let raw = RawImage::new(17, 33, 3, data).unwrap();
        let a = preprocess_image(&raw, Modality::Rgb, &policy()).unwrap();
        let b = preprocess_image(&raw, Modality::Rgb, &policy()).unwrap();
        let bits = |t: &ImageTensor| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn malformed_buffer_is_rejected() {
        let raw = RawImage {
            width: 4,
            height: 4,
            channels: 3,
            data: vec![0.0; 5],
        };
        assert!(preprocess_image(&raw, Modality::Rgb, &policy()).is_err());
    }

    #[test]
    fn crop_respects_margin_and_bounds() {
        let data: Vec<f32> = (0..100).map(|v| v as f32).collect();
        let raw = RawImage::new(10, 10, 1, data).unwrap();
        let c = crop(&raw, BoundingBox { x: 2, y: 2, width: 5, height: 5 }, 0.2);
        assert_eq!((c.width, c.height), (7, 7));
        assert_eq!(c.data[0], 11.0);
        let edge = crop(&raw, BoundingBox { x: 0, y: 0, width: 10, height: 10 }, 0.5);
        assert_eq!((edge.width, edge.height), (10, 10));
    }
}
