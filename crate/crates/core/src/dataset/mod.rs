//! Paired RGB-D re-identification data: sample index, identity splits,
//! preprocessing and a synthetic paired-modality generator.

mod loader;
mod preprocess;
mod split;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use loader::{load_dataset, read_raw_image, Layout};
pub use preprocess::{
    preprocess_image, preprocess_sample, ChannelStats, DepthEncoding, ImageTensor, NormStats, PreprocPolicy,
    INPUT_HEIGHT, INPUT_WIDTH,
};
pub use split::{apply_split, make_validation_fold, SplitSpec, N_FOLDS};
pub use synthetic::{
    generate_synthetic, generate_synthetic_with_descriptors, write_synthetic_dir, BodyShape,
    IdentityDescriptor, SynthSpec,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Depth,
}

impl Modality {
    pub fn other(self) -> Modality {
        match self {
            Modality::Rgb => Modality::Depth,
            Modality::Depth => Modality::Rgb,
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Modality::Rgb => "RGB",
            Modality::Depth => "D",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Rgb => "rgb",
            Modality::Depth => "depth",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" => Ok(Modality::Rgb),
            "depth" | "d" => Ok(Modality::Depth),
            other => Err(Error::Config(format!("unknown modality `{other}`"))),
        }
    }
}

/// Decoded image in planar (channel-major) layout with values in sensor units:
/// RGB in [0, 1], depth in metres.
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "image must have nonzero dimensions, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "buffer of {} values does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, values: &[f32]) -> Self {
        let plane = width * height;
        let data = values
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, plane))
            .collect();
        Self {
            width,
            height,
            channels: values.len(),
            data,
        }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let plane = self.width * self.height;
        &self.data[c * plane..(c + 1) * plane]
    }
}

#[derive(Clone, Debug)]
pub enum ImageSource {
    Path(PathBuf),
    Buffer(Arc<RawImage>),
}

impl ImageSource {
    pub fn load(&self) -> Result<Arc<RawImage>> {
        match self {
            ImageSource::Path(p) => read_raw_image(p).map(Arc::new),
            ImageSource::Buffer(b) => Ok(Arc::clone(b)),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            ImageSource::Path(p) => p.display().to_string(),
            ImageSource::Buffer(_) => "<in-memory>".to_string(),
        }
    }
}

/// Pixel-space crop box `(x, y, width, height)` in the raw image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub source: ImageSource,
    pub identity: u32,
    pub modality: Modality,
    /// Links the RGB and depth captures taken at the same instant.
    pub pair_key: String,
    pub sequence_id: String,
    pub camera: Option<String>,
    pub bbox: Option<BoundingBox>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub item: String,
    pub reason: String,
}

/// Images that were discovered but left out of an index.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionReport {
    pub entries: Vec<Exclusion>,
}

impl ExclusionReport {
    pub fn push(&mut self, item: impl Into<String>, reason: impl Into<String>) {
        self.entries.push(Exclusion {
            item: item.into(),
            reason: reason.into(),
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// An ordered collection of samples. Samples are kept sorted by
/// `(identity, pair_key, modality)` so that every derived ordering is stable.
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub name: String,
    samples: Vec<Sample>,
    identities: BTreeSet<u32>,
    pub exclusions: ExclusionReport,
}

impl DatasetIndex {
    pub fn new(name: impl Into<String>, mut samples: Vec<Sample>) -> Result<Self> {
        samples.sort_by(|a, b| {
            (a.identity, &a.pair_key, a.modality).cmp(&(b.identity, &b.pair_key, b.modality))
        });
        let mut by_key: BTreeMap<(&str, Modality), u32> = BTreeMap::new();
        for s in &samples {
            if by_key
                .insert((s.pair_key.as_str(), s.modality), s.identity)
                .is_some()
            {
                return Err(Error::Precondition(format!(
                    "pair key `{}` has more than one {} sample",
                    s.pair_key, s.modality
                )));
            }
        }
        for s in &samples {
            if let Some(&other) = by_key.get(&(s.pair_key.as_str(), s.modality.other())) {
                if other != s.identity {
                    return Err(Error::Precondition(format!(
                        "pair key `{}` links identities {} and {}",
                        s.pair_key, s.identity, other
                    )));
                }
            }
        }
        let identities = samples.iter().map(|s| s.identity).collect();
        Ok(Self {
            name: name.into(),
            samples,
            identities,
            exclusions: ExclusionReport::default(),
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn identities(&self) -> &BTreeSet<u32> {
        &self.identities
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sub-index of the samples whose identity is in `ids`.
    pub fn restrict(&self, name: impl Into<String>, ids: &BTreeSet<u32>) -> DatasetIndex {
        let samples: Vec<Sample> = self
            .samples
            .iter()
            .filter(|s| ids.contains(&s.identity))
            .cloned()
            .collect();
        let identities = samples.iter().map(|s| s.identity).collect();
        DatasetIndex {
            name: name.into(),
            samples,
            identities,
            exclusions: ExclusionReport::default(),
        }
    }

    pub fn of_modality(&self, modality: Modality) -> DatasetIndex {
        let samples: Vec<Sample> = self
            .samples
            .iter()
            .filter(|s| s.modality == modality)
            .cloned()
            .collect();
        let identities = samples.iter().map(|s| s.identity).collect();
        DatasetIndex {
            name: format!("{}/{}", self.name, modality),
            samples,
            identities,
            exclusions: ExclusionReport::default(),
        }
    }

    pub fn count_modality(&self, modality: Modality) -> usize {
        self.samples.iter().filter(|s| s.modality == modality).count()
    }

    /// Index pairs `(rgb_position, depth_position)` of complete RGB-depth pairs,
    /// ordered by pair key.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut rgb: BTreeMap<&str, usize> = BTreeMap::new();
        let mut depth: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            match s.modality {
                Modality::Rgb => rgb.insert(s.pair_key.as_str(), i),
                Modality::Depth => depth.insert(s.pair_key.as_str(), i),
            };
        }
        rgb.iter()
            .filter_map(|(k, &r)| depth.get(k).map(|&d| (r, d)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: u32, key: &str, m: Modality) -> Sample {
        Sample {
            source: ImageSource::Buffer(Arc::new(RawImage::filled(2, 2, &[0.0]))),
            identity: id,
            modality: m,
            pair_key: key.into(),
            sequence_id: "s".into(),
            camera: None,
            bbox: None,
        }
    }

    #[test]
    fn index_sorts_and_pairs() {
        let idx = DatasetIndex::new(
            "t",
            vec![
                sample(2, "b", Modality::Depth),
                sample(1, "a", Modality::Rgb),
                sample(2, "b", Modality::Rgb),
                sample(1, "a", Modality::Depth),
                sample(1, "c", Modality::Rgb),
            ],
        )
        .unwrap();
        let ids: Vec<u32> = idx.samples().iter().map(|s| s.identity).collect();
        assert_eq!(ids, vec![1, 1, 1, 2, 2]);
        assert_eq!(idx.pairs().len(), 2);
        for (r, d) in idx.pairs() {
            assert_eq!(idx.samples()[r].pair_key, idx.samples()[d].pair_key);
            assert_eq!(idx.samples()[r].modality, Modality::Rgb);
            assert_eq!(idx.samples()[d].modality, Modality::Depth);
        }
    }

    #[test]
    fn pairing_violations_are_rejected() {
        let dup = DatasetIndex::new(
            "t",
            vec![sample(1, "a", Modality::Rgb), sample(1, "a", Modality::Rgb)],
        );
        assert!(dup.is_err());
        let cross = DatasetIndex::new(
            "t",
            vec![sample(1, "a", Modality::Rgb), sample(2, "a", Modality::Depth)],
        );
        assert!(cross.is_err());
    }
}
