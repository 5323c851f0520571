//! Synthetic paired RGB-depth pedestrians.
//!
//! Each identity is a latent descriptor: body-shape parameters plus an upper
//! and lower clothing colour. A capture draws a pose jitter and renders the
//! same flat-shaded silhouette twice:
//!
//! * depth: silhouette at a per-capture distance in front of a far wall, plus noise;
//! * RGB: the silhouette painted with the identity's skin/clothing colours over a
//!   per-capture grey background, plus noise.
//!
//! The depth image therefore carries only the geometric part of the identity
//! signal that is also visible in the RGB image.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DatasetIndex, ImageSource, Modality, RawImage, Sample};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_identities: u32,
    pub images_per_identity: u32,
    pub noise_sigma: f32,
    /// Minimum Euclidean distance between the 6-d clothing-colour descriptors
    /// (upper RGB, lower RGB) of any two identities.
    pub color_separation: f32,
    /// `"<height>x<width>"` of the rendered images.
    pub image_size: String,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_identities: 48,
            images_per_identity: 12,
            noise_sigma: 0.03,
            color_separation: 0.35,
            image_size: "64x32".into(),
        }
    }
}

impl SynthSpec {
    /// Parses `key = value` lines; `#` starts a comment. Missing keys keep defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let spec: SynthSpec =
            toml::from_str(text).map_err(|e| Error::Config(format!("synthetic spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        format!(
            "n_identities = {}\nimages_per_identity = {}\nnoise_sigma = {}\ncolor_separation = {}\nimage_size = \"{}\"\n",
            self.n_identities, self.images_per_identity, self.noise_sigma, self.color_separation, self.image_size
        )
    }

    pub fn dims(&self) -> Result<(usize, usize)> {
        let (h, w) = self
            .image_size
            .split_once(['x', 'X'])
            .ok_or_else(|| Error::Config(format!("image_size `{}` is not HxW", self.image_size)))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("image_size `{}` is not HxW", self.image_size)))
        };
        Ok((parse(h)?, parse(w)?))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_identities < 4 {
            return Err(Error::Config(format!(
                "n_identities must be >= 4, got {}",
                self.n_identities
            )));
        }
        if self.images_per_identity < 8 {
            return Err(Error::Config(format!(
                "images_per_identity must be >= 8, got {}",
                self.images_per_identity
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be finite and >= 0".into()));
        }
        if !(self.color_separation.is_finite() && self.color_separation >= 0.0) {
            return Err(Error::Config("color_separation must be finite and >= 0".into()));
        }
        let (h, w) = self.dims()?;
        if h < 16 || w < 8 {
            return Err(Error::Config(format!("image_size {h}x{w} is too small (min 16x8)")));
        }
        Ok(())
    }
}

/// Body proportions, relative to the image size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyShape {
    pub height: f32,
    pub head_radius: f32,
    pub shoulder_half_width: f32,
    pub hip_half_width: f32,
    pub torso_fraction: f32,
    pub arm_thickness: f32,
    pub leg_thickness: f32,
    pub stance: f32,
    pub arm_angle: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityDescriptor {
    pub identity: u32,
    pub shape: BodyShape,
    pub upper: [f32; 3],
    pub lower: [f32; 3],
    pub skin: [f32; 3],
}

impl IdentityDescriptor {
    pub fn color_descriptor(&self) -> [f32; 6] {
        let (u, l) = (self.upper, self.lower);
        [u[0], u[1], u[2], l[0], l[1], l[2]]
    }
}

fn color_distance(a: &[f32; 6], b: &[f32; 6]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt()
}

fn sample_descriptors(spec: &SynthSpec, seed_value: u64) -> Result<Vec<IdentityDescriptor>> {
    const MAX_ATTEMPTS: usize = 100_000;
    let mut color_rng = seed::rng_for(seed_value, "synthetic-colors", &[]);
    let mut colors: Vec<[f32; 6]> = Vec::with_capacity(spec.n_identities as usize);
    let mut attempts = 0;
    while colors.len() < spec.n_identities as usize {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::Config(format!(
                "cannot place {} identities with colour separation {}",
                spec.n_identities, spec.color_separation
            )));
        }
        let c: [f32; 6] = std::array::from_fn(|_| color_rng.random_range(0.05..0.95));
        if colors.iter().all(|o| color_distance(o, &c) >= spec.color_separation) {
            colors.push(c);
        }
    }
    let skins = [[0.87, 0.72, 0.60], [0.76, 0.57, 0.42], [0.55, 0.38, 0.26], [0.94, 0.80, 0.70]];
    Ok(colors
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let mut r = seed::rng_for(seed_value, "synthetic-shape", &[i as u64]);
            let shape = BodyShape {
                height: r.random_range(0.70..0.95),
                head_radius: r.random_range(0.055..0.085),
                shoulder_half_width: r.random_range(0.24..0.42),
                hip_half_width: r.random_range(0.16..0.32),
                torso_fraction: r.random_range(0.28..0.40),
                arm_thickness: r.random_range(0.08..0.16),
                leg_thickness: r.random_range(0.12..0.22),
                stance: r.random_range(0.02..0.16),
                arm_angle: r.random_range(4f32..30.0).to_radians(),
            };
            IdentityDescriptor {
                identity: i as u32,
                shape,
                upper: [c[0], c[1], c[2]],
                lower: [c[3], c[4], c[5]],
                skin: skins[r.random_range(0..skins.len())],
            }
        })
        .collect())
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Part {
    Background,
    Head,
    Upper,
    Lower,
}

struct Pose {
    dx: f32,
    dy: f32,
    scale: f32,
    arm_jitter: f32,
    stance_jitter: f32,
}

fn segment_distance(px: f32, py: f32, ax: f32, ay: f32, bx: f32, by: f32) -> f32 {
    let (vx, vy) = (bx - ax, by - ay);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        (((px - ax) * vx + (py - ay) * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (ax + t * vx, ay + t * vy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

fn render_parts(shape: &BodyShape, pose: &Pose, h: usize, w: usize) -> Vec<Part> {
    let (hf, wf) = (h as f32, w as f32);
    let body = shape.height * hf * pose.scale;
    let cx = wf / 2.0 + pose.dx;
    let feet = hf * 0.97 + pose.dy;
    let top = feet - body;
    let head_r = shape.head_radius * body;
    let head_cy = top + head_r;
    let shoulder_y = top + 2.0 * head_r + 0.02 * body;
    let hip_y = shoulder_y + shape.torso_fraction * body;
    let sw = shape.shoulder_half_width * wf * pose.scale;
    let hw = shape.hip_half_width * wf * pose.scale;
    let arm_r = shape.arm_thickness * wf * pose.scale / 2.0;
    let leg_r = shape.leg_thickness * wf * pose.scale / 2.0;
    let arm_len = 0.38 * body;
    let angle = shape.arm_angle + pose.arm_jitter;
    let stance = (shape.stance + pose.stance_jitter).max(0.0) * wf;

    let mut parts = vec![Part::Background; h * w];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let head = ((px - cx) / (0.85 * head_r)).powi(2) + ((py - head_cy) / head_r).powi(2) <= 1.0;
            let torso = py >= shoulder_y && py <= hip_y && {
                let t = (py - shoulder_y) / (hip_y - shoulder_y);
                (px - cx).abs() <= sw + t * (hw - sw)
            };
            let arm = [-1f32, 1.0].iter().any(|&side| {
                let ax = cx + side * (sw - arm_r);
                let bx = ax + side * arm_len * angle.sin();
                let by = shoulder_y + arm_len * angle.cos();
                segment_distance(px, py, ax, shoulder_y, bx, by) <= arm_r
            });
            let leg = [-1f32, 1.0].iter().any(|&side| {
                let ax = cx + side * hw / 2.0;
                let bx = cx + side * (hw / 2.0 + stance);
                segment_distance(px, py, ax, hip_y, bx, feet - leg_r) <= leg_r
            });
            parts[y * w + x] = if head {
                Part::Head
            } else if torso || arm {
                Part::Upper
            } else if leg {
                Part::Lower
            } else {
                Part::Background
            };
        }
    }
    parts
}

fn render_pair(
    desc: &IdentityDescriptor,
    spec: &SynthSpec,
    seed_value: u64,
    capture: u32,
) -> Result<(RawImage, RawImage)> {
    let (h, w) = spec.dims()?;
    let mut r = seed::rng_for(seed_value, "synthetic-capture", &[u64::from(desc.identity), u64::from(capture)]);
    let pose = Pose {
        dx: r.random_range(-1.5..1.5),
        dy: r.random_range(-1.0..1.0),
        scale: r.random_range(0.97..1.03),
        arm_jitter: r.random_range(-5f32..5.0).to_radians(),
        stance_jitter: r.random_range(-0.02..0.02),
    };
    let parts = render_parts(&desc.shape, &pose, h, w);
    let noise = Normal::new(0.0f32, spec.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;

    let wall = r.random_range(0.85..0.95);
    let distance = r.random_range(0.30..0.60);
    let depth: Vec<f32> = parts
        .iter()
        .map(|p| {
            let base = if *p == Part::Background { wall } else { distance };
            base + noise.sample(&mut r)
        })
        .collect();

    let gray = r.random_range(0.35..0.65);
    let tint: [f32; 3] = std::array::from_fn(|_| r.random_range(-0.05..0.05));
    let light = r.random_range(0.85..1.15);
    let plane = h * w;
    let mut rgb = vec![0f32; 3 * plane];
    for (i, p) in parts.iter().enumerate() {
        for c in 0..3 {
            let base = match p {
                Part::Background => gray + tint[c],
                Part::Head => desc.skin[c] * light,
                Part::Upper => desc.upper[c] * light,
                Part::Lower => desc.lower[c] * light,
            };
            rgb[c * plane + i] = (base + noise.sample(&mut r)).clamp(0.0, 1.0);
        }
    }
    Ok((RawImage::new(w, h, 3, rgb)?, RawImage::new(w, h, 1, depth)?))
}

/// Generates the synthetic dataset together with the latent identity descriptors.
pub fn generate_synthetic_with_descriptors(
    spec: &SynthSpec,
    seed_value: u64,
) -> Result<(DatasetIndex, Vec<IdentityDescriptor>)> {
    spec.validate()?;
    let descriptors = sample_descriptors(spec, seed_value)?;
    let mut samples = Vec::with_capacity(descriptors.len() * spec.images_per_identity as usize * 2);
    for d in &descriptors {
        for j in 0..spec.images_per_identity {
            let (rgb, depth) = render_pair(d, spec, seed_value, j)?;
            let pair_key = format!("{:03}/{:03}", d.identity, j);
            for (img, modality) in [(rgb, Modality::Rgb), (depth, Modality::Depth)] {
                samples.push(Sample {
                    source: ImageSource::Buffer(Arc::new(img)),
                    identity: d.identity,
                    modality,
                    pair_key: pair_key.clone(),
                    sequence_id: format!("seq{:03}", d.identity),
                    camera: Some("synthetic".into()),
                    bbox: None,
                });
            }
        }
    }
    Ok((DatasetIndex::new("synthetic", samples)?, descriptors))
}

pub fn generate_synthetic(spec: &SynthSpec, seed_value: u64) -> Result<DatasetIndex> {
    generate_synthetic_with_descriptors(spec, seed_value).map(|(idx, _)| idx)
}

/// Writes an in-memory synthetic index in the standard directory layout:
/// RGB as 8-bit PNG, depth as 16-bit millimetre PNG.
pub fn write_synthetic_dir(index: &DatasetIndex, root: &Path) -> Result<()> {
    for s in index.samples() {
        let raw = s.source.load()?;
        let key = s.pair_key.rsplit('/').next().unwrap_or(&s.pair_key);
        let dir = root.join(s.identity.to_string());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(format!("{key}_{}.png", s.modality));
        let (w, h) = (raw.width as u32, raw.height as u32);
        let res = match s.modality {
            Modality::Rgb => {
                let plane = raw.width * raw.height;
                let mut buf = Vec::with_capacity(3 * plane);
                for i in 0..plane {
                    for c in 0..3 {
                        buf.push((raw.data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
                    }
                }
                image::RgbImage::from_raw(w, h, buf).map(|img| img.save(&path))
            }
            Modality::Depth => {
                let buf: Vec<u16> = raw
                    .plane(0)
                    .iter()
                    .map(|v| (v.max(0.0) * 1000.0).round().min(65535.0) as u16)
                    .collect();
                image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w, h, buf).map(|img| img.save(&path))
            }
        };
        match res {
            Some(Ok(())) => {}
            Some(Err(e)) => {
                return Err(Error::Image {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })
            }
            None => return Err(Error::Shape(format!("cannot encode {}", path.display()))),
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            n_identities: 16,
            images_per_identity: 16,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn counts() {
        let idx = generate_synthetic(&small(), 7).unwrap();
        assert_eq!(idx.identities().len(), 16);
        assert_eq!(idx.len(), 512);
        assert_eq!(idx.pairs().len(), 256);
    }

    #[test]
    fn same_seed_same_pixels() {
        let spec = SynthSpec {
            n_identities: 4,
            images_per_identity: 8,
            ..SynthSpec::default()
        };
        let a = generate_synthetic(&spec, 3).unwrap();
        let b = generate_synthetic(&spec, 3).unwrap();
        for (x, y) in a.samples().iter().zip(b.samples()) {
            assert_eq!(x.pair_key, y.pair_key);
            assert_eq!(*x.source.load().unwrap(), *y.source.load().unwrap());
        }
        let c = generate_synthetic(&spec, 4).unwrap();
        assert_ne!(*a.samples()[0].source.load().unwrap(), *c.samples()[0].source.load().unwrap());
    }

    #[test]
    fn colour_descriptors_respect_separation() {
        let spec = small();
        let (_, desc) = generate_synthetic_with_descriptors(&spec, 7).unwrap();
        for i in 0..desc.len() {
            for j in i + 1..desc.len() {
                let (a, b) = (desc[i].color_descriptor(), desc[j].color_descriptor());
                let d: f64 = a
                    .iter()
                    .zip(&b)
                    .map(|(x, y)| f64::from(x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(d >= f64::from(spec.color_separation) - 1e-6, "{i},{j}: {d}");
            }
        }
    }

    #[test]
    fn pairs_share_silhouette() {
        let spec = SynthSpec {
            n_identities: 4,
            images_per_identity: 8,
            noise_sigma: 0.0,
            ..SynthSpec::default()
        };
        let idx = generate_synthetic(&spec, 1).unwrap();
        for (r, d) in idx.pairs() {
            let rgb = idx.samples()[r].source.load().unwrap();
            let depth = idx.samples()[d].source.load().unwrap();
            let wall = depth.plane(0).iter().cloned().fold(f32::MIN, f32::max);
            let fg = depth.plane(0).iter().filter(|&&v| v < wall - 0.1).count();
            assert!(fg > 50, "silhouette too small: {fg}");
            assert_eq!(rgb.width, depth.width);
        }
    }

    #[test]
    fn degenerate_specs_rejected() {
        assert!(SynthSpec { n_identities: 3, ..SynthSpec::default() }.validate().is_err());
        assert!(SynthSpec { images_per_identity: 7, ..SynthSpec::default() }.validate().is_err());
        assert!(SynthSpec { image_size: "64".into(), ..SynthSpec::default() }.validate().is_err());
        let crowded = SynthSpec {
            n_identities: 500,
            color_separation: 2.0,
            ..SynthSpec::default()
        };
        assert!(generate_synthetic(&crowded, 0).is_err());
    }

    #[test]
    fn spec_text_round_trip() {
        let spec = SynthSpec {
            n_identities: 20,
            noise_sigma: 0.05,
            ..SynthSpec::default()
        };
        assert_eq!(SynthSpec::parse(&spec.to_text()).unwrap(), spec);
        let partial = SynthSpec::parse("# comment\nn_identities = 8\n").unwrap();
        assert_eq!(partial.n_identities, 8);
        assert!(SynthSpec::parse("bogus = 1").is_err());
    }
}
