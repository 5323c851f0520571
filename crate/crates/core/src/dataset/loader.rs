//! Directory loader.
//!
//! All layouts share one on-disk convention:
//!
//! ```text
//! <root>/<identity_label>/<pair_key>_rgb.png
//! <root>/<identity_label>/<pair_key>_depth.png
//! ```
//!
//! Adapter mapping for the original datasets:
//!
//! * **BIWI RGBD-ID**: every recorded person/clothing combination becomes its own
//!   `<identity_label>` (0..=77, the labels used by the shipped split files). Each
//!   Kinect frame contributes `<sequence>-<frame>_rgb.png` (cropped from the
//!   1280x960 colour image) and `<sequence>-<frame>_depth.png` (cropped from the
//!   640x480 depth map, 16-bit millimetres). Frames are coupled with no capture
//!   offset, so the frame id is the pair key.
//! * **RobotPKU**: person folders map to labels 0..=89. The dataset already ships
//!   cropped, coupled RGB/depth images; the given correspondence is used as the
//!   pair key as-is, with no attempt to compensate the small RGB/depth time offset.
//! * **SYNTHETIC_DIR**: the output of `prepare-data` for synthetic data.
//!
//! 8-bit channels are scaled to [0, 1]; 16-bit single-channel images are read as
//! millimetres and converted to metres.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{DatasetIndex, ExclusionReport, ImageSource, Modality, RawImage, Sample};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Layout {
    Biwi,
    RobotPku,
    SyntheticDir,
}

impl Layout {
    /// Layouts built from coupled captures drop images without a partner.
    pub fn requires_pairing(self) -> bool {
        matches!(self, Layout::Biwi | Layout::RobotPku)
    }

    pub fn name(self) -> &'static str {
        match self {
            Layout::Biwi => "BIWI",
            Layout::RobotPku => "RobotPKU",
            Layout::SyntheticDir => "SYNTHETIC_DIR",
        }
    }
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "BIWI" => Ok(Layout::Biwi),
            "ROBOTPKU" | "ROBOT_PKU" => Ok(Layout::RobotPku),
            "SYNTHETIC_DIR" | "SYNTHETIC" => Ok(Layout::SyntheticDir),
            other => Err(Error::Config(format!("unknown dataset layout `{other}`"))),
        }
    }
}

fn parse_file_name(name: &str) -> Option<(&str, Modality)> {
    let stem = name.strip_suffix(".png")?;
    if let Some(key) = stem.strip_suffix("_rgb") {
        Some((key, Modality::Rgb))
    } else {
        stem.strip_suffix("_depth").map(|key| (key, Modality::Depth))
    }
}

/// Indexes every image under `root`. Images are not decoded here; decoding
/// failures surface at preprocessing time.
pub fn load_dataset(root: &Path, layout: Layout) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Config(format!(
            "dataset root {} does not exist or is not a directory",
            root.display()
        )));
    }
    let mut exclusions = ExclusionReport::default();
    let mut found: Vec<Sample> = Vec::new();

    let mut id_dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    id_dirs.sort();

    for dir in id_dirs {
        let dir_name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let Ok(identity) = dir_name.parse::<u32>() else {
            exclusions.push(dir.display().to_string(), "identity directory is not a label");
            continue;
        };
        let mut files: Vec<_> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for file in files {
            let name = file
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let Some((key, modality)) = parse_file_name(&name) else {
                exclusions.push(file.display().to_string(), "unrecognised file name");
                continue;
            };
            let sequence_id = key.split(['-', '_']).next().unwrap_or(key).to_string();
            found.push(Sample {
                source: ImageSource::Path(file.clone()),
                identity,
                modality,
                pair_key: format!("{identity}/{key}"),
                sequence_id,
                camera: None,
                bbox: None,
            });
        }
    }

    if layout.requires_pairing() {
        let mut per_key: BTreeMap<String, u8> = BTreeMap::new();
        for s in &found {
            *per_key.entry(s.pair_key.clone()).or_default() += 1;
        }
        found.retain(|s| {
            let paired = per_key[&s.pair_key] == 2;
            if !paired {
                exclusions.push(s.source.describe(), "no coupled image in the other modality");
            }
            paired
        });
    }

    if found.is_empty() {
        return Err(Error::Config(format!(
            "no samples found under {} for layout {}",
            root.display(),
            layout.name()
        )));
    }
    let mut index = DatasetIndex::new(layout.name(), found)?;
    index.exclusions = exclusions;
    Ok(index)
}

/// Decodes a PNG into a planar [`RawImage`].
pub fn read_raw_image(path: &Path) -> Result<RawImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    use image::DynamicImage as D;
    let (channels, data) = match img {
        D::ImageLuma16(buf) => (1, buf.into_raw().into_iter().map(|v| v as f32 / 1000.0).collect()),
        D::ImageLuma8(buf) => (1, buf.into_raw().into_iter().map(|v| v as f32 / 255.0).collect()),
        other => {
            let rgb = other.to_rgb32f();
            let mut planar = vec![0f32; 3 * plane];
            for (i, px) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    planar[c * plane + i] = px[c];
                }
            }
            (3, planar)
        }
    };
    RawImage::new(w, h, channels, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_names_parse() {
        assert_eq!(parse_file_name("s01-17_rgb.png"), Some(("s01-17", Modality::Rgb)));
        assert_eq!(parse_file_name("x_depth.png"), Some(("x", Modality::Depth)));
        assert_eq!(parse_file_name("x_ir.png"), None);
        assert_eq!(parse_file_name("x_rgb.jpg"), None);
    }

    #[test]
    fn missing_root_is_fatal() {
        let err = load_dataset(Path::new("/definitely/not/here"), Layout::Biwi).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn empty_dir_has_no_samples() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path(), Layout::SyntheticDir).unwrap_err();
        assert!(err.to_string().contains("no samples found"));
    }

    #[test]
    fn unpaired_images_go_to_exclusion_report() {
        let dir = tempfile::tempdir().unwrap();
        let id_dir = dir.path().join("3");
        fs::create_dir_all(&id_dir).unwrap();
        let rgb = image::RgbImage::from_pixel(4, 8, image::Rgb([10, 20, 30]));
        let depth = image::ImageBuffer::<image::Luma<u16>, _>::from_pixel(4, 8, image::Luma([1500u16]));
        rgb.save(id_dir.join("a_rgb.png")).unwrap();
        depth.save(id_dir.join("a_depth.png")).unwrap();
        rgb.save(id_dir.join("b_rgb.png")).unwrap();

        let idx = load_dataset(dir.path(), Layout::Biwi).unwrap();
        assert_eq!(idx.len(), 2);
        assert_eq!(idx.exclusions.len(), 1);
        let lenient = load_dataset(dir.path(), Layout::SyntheticDir).unwrap();
        assert_eq!(lenient.len(), 3);

        let d = read_raw_image(&id_dir.join("a_depth.png")).unwrap();
        assert_eq!(d.channels, 1);
        assert!((d.data[0] - 1.5).abs() < 1e-6);
        let c = read_raw_image(&id_dir.join("a_rgb.png")).unwrap();
        assert_eq!((c.channels, c.width, c.height), (3, 4, 8));
        assert!((c.plane(2)[0] - 30.0 / 255.0).abs() < 1e-6);
    }
}
