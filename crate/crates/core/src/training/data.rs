use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::backbone::{embed_all, InputAdapter, ModelState};
use crate::dataset::{preprocess_sample, DatasetIndex, ImageTensor, Modality, PreprocPolicy};
use crate::error::{Error, Result};
use crate::evaluation::EmbeddedSet;

/// Preprocessed images with their labels, ready for batching. Tensors are
/// shared, so subsets are cheap.
#[derive(Clone, Debug, Default)]
pub struct ImageSet {
    pub tensors: Vec<Arc<ImageTensor>>,
    pub labels: Vec<u32>,
    pub pair_keys: Vec<String>,
}

impl ImageSet {
    pub fn from_index(index: &DatasetIndex, policy: &PreprocPolicy) -> Result<Self> {
        let mut set = ImageSet::default();
        for s in index.samples() {
            let t = preprocess_sample(s, policy).map_err(|e| match e {
                Error::Shape(m) => Error::Image {
                    path: s.source.describe(),
                    message: m,
                },
                other => other,
            })?;
            set.tensors.push(Arc::new(t));
            set.labels.push(s.identity);
            set.pair_keys.push(s.pair_key.clone());
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn modality(&self, i: usize) -> Modality {
        self.tensors[i].modality
    }

    pub fn identities(&self) -> BTreeSet<u32> {
        self.labels.iter().copied().collect()
    }

    pub fn select(&self, idx: &[usize]) -> ImageSet {
        ImageSet {
            tensors: idx.iter().map(|&i| Arc::clone(&self.tensors[i])).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            pair_keys: idx.iter().map(|&i| self.pair_keys[i].clone()).collect(),
        }
    }

    fn filter(&self, keep: impl Fn(usize) -> bool) -> ImageSet {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        self.select(&idx)
    }

    pub fn of_modality(&self, m: Modality) -> ImageSet {
        self.filter(|i| self.modality(i) == m)
    }

    pub fn restrict(&self, ids: &BTreeSet<u32>) -> ImageSet {
        self.filter(|i| ids.contains(&self.labels[i]))
    }

    pub fn concat(&self, other: &ImageSet) -> ImageSet {
        let mut out = self.clone();
        out.tensors.extend(other.tensors.iter().cloned());
        out.labels.extend(&other.labels);
        out.pair_keys.extend(other.pair_keys.iter().cloned());
        out
    }

    /// `(rgb_position, depth_position)` for every complete pair, by pair key.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut rgb: BTreeMap<&str, usize> = BTreeMap::new();
        let mut depth: BTreeMap<&str, usize> = BTreeMap::new();
        for i in 0..self.len() {
            let slot = match self.modality(i) {
                Modality::Rgb => &mut rgb,
                Modality::Depth => &mut depth,
            };
            slot.insert(self.pair_keys[i].as_str(), i);
        }
        rgb.iter()
            .filter_map(|(k, &r)| depth.get(k).map(|&d| (r, d)))
            .collect()
    }

    pub fn refs(&self, idx: &[usize]) -> Vec<&ImageTensor> {
        idx.iter().map(|&i| self.tensors[i].as_ref()).collect()
    }

    /// Maps identities to contiguous class indices in ascending identity order.
    pub fn class_map(&self) -> BTreeMap<u32, u32> {
        self.identities()
            .into_iter()
            .enumerate()
            .map(|(c, id)| (id, c as u32))
            .collect()
    }
}

pub const EMBED_CHUNK: usize = 64;

/// Embeds every image of `set` with `model`.
pub fn embed_set(model: &ModelState, set: &ImageSet, adapter: InputAdapter) -> Result<EmbeddedSet> {
    if set.is_empty() {
        return Err(Error::Precondition("cannot embed an empty image set".into()));
    }
    let all: Vec<usize> = (0..set.len()).collect();
    let emb = embed_all(model, &set.refs(&all), adapter, EMBED_CHUNK)?;
    EmbeddedSet::new(emb, set.labels.clone(), set.pair_keys.clone())
}
