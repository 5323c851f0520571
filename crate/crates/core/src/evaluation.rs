//! Nearest-neighbour retrieval and the single-gallery-shot protocol.
//!
//! Each repetition draws one gallery image per identity. Queries are capped per
//! identity and selected once per seed. With `exclude_coupled`, gallery images
//! that share a query's pair key are never ranked for that query; the
//! identity's slot falls through to its next candidate.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::embedding::{euclidean, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Direction {
    QRgbGDepth,
    QDepthGRgb,
    SingleModal,
}

impl Direction {
    pub fn label(self) -> &'static str {
        match self {
            Direction::QRgbGDepth => "Q:RGB,G:D",
            Direction::QDepthGRgb => "Q:D,G:RGB",
            Direction::SingleModal => "single-modal",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Distance {
    #[default]
    Euclidean,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MapMode {
    /// AP over the sampled single-shot gallery, i.e. `1 / rank`.
    #[default]
    SingleShot,
    /// Standard AP over every gallery image, computed once.
    FullGallery,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSpec {
    pub gallery_repetitions: usize,
    pub max_queries_per_identity: usize,
    pub exclude_coupled: bool,
    pub distance: Distance,
    pub seed: u64,
    pub map_mode: MapMode,
    /// Length of the stored CMC curve.
    pub cmc_ranks: usize,
}

impl Default for ProtocolSpec {
    fn default() -> Self {
        Self {
            gallery_repetitions: 10,
            max_queries_per_identity: 50,
            exclude_coupled: true,
            distance: Distance::Euclidean,
            seed: 0,
            map_mode: MapMode::SingleShot,
            cmc_ranks: 20,
        }
    }
}

impl ProtocolSpec {
    pub fn validate(&self) -> Result<()> {
        if self.gallery_repetitions == 0 {
            return Err(Error::Config("gallery_repetitions must be at least 1".into()));
        }
        if self.max_queries_per_identity == 0 {
            return Err(Error::Config("max_queries_per_identity must be at least 1".into()));
        }
        if self.cmc_ranks < 10 {
            return Err(Error::Config("cmc_ranks must be at least 10".into()));
        }
        Ok(())
    }

    /// Same protocol with another seed; used for per-fold evaluation.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    fn descriptor_eq(&self, other: &Self) -> bool {
        Self { seed: 0, ..self.clone() } == Self { seed: 0, ..other.clone() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
}

impl Metrics {
    fn from_fn(f: impl Fn(fn(&Metrics) -> f64) -> f64) -> Self {
        Self {
            rank1: f(|m| m.rank1),
            rank5: f(|m| m.rank5),
            rank10: f(|m| m.rank10),
            map: f(|m| m.map),
        }
    }

    pub fn mean_of(items: &[Metrics]) -> Metrics {
        let n = items.len().max(1) as f64;
        Self::from_fn(|get| items.iter().map(get).sum::<f64>() / n)
    }

    /// Population standard deviation.
    pub fn std_of(items: &[Metrics]) -> Metrics {
        let mean = Self::mean_of(items);
        let n = items.len().max(1) as f64;
        Self::from_fn(|get| {
            let mu = get(&mean);
            (items.iter().map(|m| (get(m) - mu).powi(2)).sum::<f64>() / n).sqrt()
        })
    }
}

/// Embeddings with aligned identity labels and pair keys.
#[derive(Clone, Debug)]
pub struct EmbeddedSet {
    pub embeddings: EmbeddingMatrix,
    pub labels: Vec<u32>,
    pub pair_keys: Vec<String>,
}

impl EmbeddedSet {
    pub fn new(embeddings: EmbeddingMatrix, labels: Vec<u32>, pair_keys: Vec<String>) -> Result<Self> {
        if embeddings.rows() != labels.len() || labels.len() != pair_keys.len() {
            return Err(Error::Shape(format!(
                "{} embeddings, {} labels, {} pair keys",
                embeddings.rows(),
                labels.len(),
                pair_keys.len()
            )));
        }
        Ok(Self {
            embeddings,
            labels,
            pair_keys,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn by_identity(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut m: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            m.entry(l).or_default().push(i);
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub direction: Direction,
    pub protocol: ProtocolSpec,
    /// Mean over folds (or over repetitions for a single evaluation).
    pub mean: Metrics,
    /// Population standard deviation over folds; zero for one fold.
    pub std: Metrics,
    pub per_fold: Vec<Metrics>,
    /// Metrics of each gallery repetition of a single evaluation.
    pub per_repetition: Vec<Metrics>,
    /// `cmc[k-1]` is the rank-k accuracy.
    pub cmc: Vec<f64>,
    pub n_queries: usize,
    pub skipped_queries: usize,
    /// Ranked gallery items that shared the query's pair key.
    pub coupled_violations: usize,
}

/// Gallery indices sorted by ascending distance, ties by ascending index.
pub fn rank_query(query: &[f32], gallery: &EmbeddingMatrix) -> Result<Vec<usize>> {
    if gallery.rows() == 0 {
        return Err(Error::Precondition("empty gallery".into()));
    }
    if query.len() != gallery.dim() {
        return Err(Error::Shape(format!(
            "query has dimension {}, gallery {}",
            query.len(),
            gallery.dim()
        )));
    }
    let d: Vec<f64> = (0..gallery.rows()).map(|j| euclidean(query, gallery.row(j))).collect();
    let mut order: Vec<usize> = (0..gallery.rows()).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    Ok(order)
}

/// Standard information-retrieval average precision of a ranked relevance list.
pub fn average_precision(relevant_in_rank_order: &[bool]) -> f64 {
    let total = relevant_in_rank_order.iter().filter(|&&r| r).count();
    if total == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &r) in relevant_in_rank_order.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    sum / total as f64
}

fn select_queries(query: &EmbeddedSet, protocol: &ProtocolSpec) -> Vec<usize> {
    let mut out = Vec::new();
    for (id, mut idx) in query.by_identity() {
        idx.shuffle(&mut seed::rng_for(protocol.seed, "eval-queries", &[u64::from(id)]));
        idx.truncate(protocol.max_queries_per_identity);
        idx.sort_unstable();
        out.extend(idx);
    }
    out
}

struct Harness<'a> {
    query: &'a EmbeddedSet,
    gallery: &'a EmbeddedSet,
    protocol: &'a ProtocolSpec,
    same_set: bool,
    dist: Vec<Vec<f64>>,
    queries: Vec<usize>,
}

impl<'a> Harness<'a> {
    fn new(query: &'a EmbeddedSet, gallery: &'a EmbeddedSet, protocol: &'a ProtocolSpec, same_set: bool) -> Result<Self> {
        protocol.validate()?;
        if query.is_empty() || gallery.is_empty() {
            return Err(Error::Precondition("query and gallery sets must be nonempty".into()));
        }
        if query.embeddings.dim() != gallery.embeddings.dim() {
            return Err(Error::Shape(format!(
                "query dimension {} differs from gallery dimension {}",
                query.embeddings.dim(),
                gallery.embeddings.dim()
            )));
        }
        let queries = select_queries(query, protocol);
        let dist = queries
            .iter()
            .map(|&q| {
                let qe = query.embeddings.row(q);
                (0..gallery.len()).map(|g| euclidean(qe, gallery.embeddings.row(g))).collect()
            })
            .collect();
        Ok(Self {
            query,
            gallery,
            protocol,
            same_set,
            dist,
            queries,
        })
    }

    fn excluded(&self, q: usize, g: usize) -> bool {
        (self.same_set && q == g)
            || (self.protocol.exclude_coupled && self.query.pair_keys[q] == self.gallery.pair_keys[g])
    }

    fn trials(&self) -> (Vec<Trial>, usize) {
        let p = self.protocol;
        let by_id = self.gallery.by_identity();
        let mut trials = Vec::new();
        let mut skipped = 0usize;
        for r in 0..p.gallery_repetitions {
            let candidates: Vec<Vec<usize>> = by_id
                .iter()
                .map(|(&id, idx)| {
                    let mut c = idx.clone();
                    c.shuffle(&mut seed::rng_for(p.seed, "eval-gallery", &[r as u64, u64::from(id)]));
                    c
                })
                .collect();
            for (qi, &q) in self.queries.iter().enumerate() {
                let gallery: Vec<usize> = candidates
                    .iter()
                    .filter_map(|c| c.iter().copied().find(|&g| !self.excluded(q, g)))
                    .collect();
                if gallery.iter().any(|&g| self.gallery.labels[g] == self.query.labels[q]) {
                    trials.push(Trial {
                        repetition: r,
                        query: q,
                        query_slot: qi,
                        gallery,
                    });
                } else {
                    skipped += 1;
                }
            }
        }
        (trials, skipped)
    }

    fn run(&self, direction: Direction) -> EvalResult {
        let p = self.protocol;
        let (trials, skipped) = self.trials();
        let full_map = (p.map_mode == MapMode::FullGallery).then(|| self.full_gallery_map());
        let mut hits = vec![vec![0usize; p.cmc_ranks]; p.gallery_repetitions];
        let mut ap_sum = vec![0.0; p.gallery_repetitions];
        let mut counts = vec![0usize; p.gallery_repetitions];
        let mut violations = 0usize;
        for t in &trials {
            let q = t.query;
            let truth = *t
                .gallery
                .iter()
                .find(|&&g| self.gallery.labels[g] == self.query.labels[q])
                .expect("trials keep the true identity");
            if p.exclude_coupled {
                violations += t
                    .gallery
                    .iter()
                    .filter(|&&g| self.query.pair_keys[q] == self.gallery.pair_keys[g])
                    .count();
            }
            let d = &self.dist[t.query_slot];
            let rank = 1 + t
                .gallery
                .iter()
                .filter(|&&g| d[g] < d[truth] || (d[g] == d[truth] && g < truth))
                .count();
            for (k, h) in hits[t.repetition].iter_mut().enumerate() {
                if rank <= k + 1 {
                    *h += 1;
                }
            }
            ap_sum[t.repetition] += 1.0 / rank as f64;
            counts[t.repetition] += 1;
        }
        let mut cmc_total = vec![0.0; p.cmc_ranks];
        let mut per_rep = Vec::with_capacity(p.gallery_repetitions);
        for r in 0..p.gallery_repetitions {
            let nf = counts[r].max(1) as f64;
            let cmc: Vec<f64> = hits[r].iter().map(|&h| h as f64 / nf).collect();
            for (t, c) in cmc_total.iter_mut().zip(&cmc) {
                *t += c;
            }
            per_rep.push(Metrics {
                rank1: cmc[0],
                rank5: cmc[4],
                rank10: cmc[9],
                map: full_map.unwrap_or(ap_sum[r] / nf),
            });
        }
        let reps = p.gallery_repetitions as f64;
        let mean = Metrics::mean_of(&per_rep);
        EvalResult {
            direction,
            protocol: p.clone(),
            mean,
            std: Metrics::default(),
            per_fold: vec![mean],
            per_repetition: per_rep,
            cmc: cmc_total.iter().map(|c| c / reps).collect(),
            n_queries: trials.len() / p.gallery_repetitions,
            skipped_queries: skipped / p.gallery_repetitions,
            coupled_violations: violations,
        }
    }

    fn full_gallery_map(&self) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (qi, &q) in self.queries.iter().enumerate() {
            let d = &self.dist[qi];
            let mut order: Vec<usize> = (0..self.gallery.len()).filter(|&g| !self.excluded(q, g)).collect();
            order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
            let rel: Vec<bool> = order.iter().map(|&g| self.gallery.labels[g] == self.query.labels[q]).collect();
            if rel.iter().any(|&r| r) {
                sum += average_precision(&rel);
                n += 1;
            }
        }
        sum / n.max(1) as f64
    }
}

/// One ranked comparison: a query against the single-shot gallery drawn for
/// one repetition. Gallery entries are indices into the gallery set, one per
/// identity, in ascending identity order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub repetition: usize,
    pub query: usize,
    query_slot: usize,
    pub gallery: Vec<usize>,
}

/// The sampled single-shot trials of a protocol, plus the number of skipped
/// (query, repetition) combinations.
pub fn protocol_trials(
    query: &EmbeddedSet,
    gallery: &EmbeddedSet,
    protocol: &ProtocolSpec,
) -> Result<(Vec<Trial>, usize)> {
    Ok(Harness::new(query, gallery, protocol, false)?.trials())
}

/// Single-gallery-shot evaluation of `query` against `gallery`.
pub fn evaluate_sets(
    query: &EmbeddedSet,
    gallery: &EmbeddedSet,
    protocol: &ProtocolSpec,
    direction: Direction,
) -> Result<EvalResult> {
    Ok(Harness::new(query, gallery, protocol, false)?.run(direction))
}

/// Query and gallery drawn from one set; a query never retrieves itself.
pub fn evaluate_single_modal(set: &EmbeddedSet, protocol: &ProtocolSpec) -> Result<EvalResult> {
    Ok(Harness::new(set, set, protocol, true)?.run(Direction::SingleModal))
}

/// Both cross-modal directions. `rgb` must be embedded by the RGB mapping and
/// `depth` by the depth mapping.
pub fn evaluate_cross_modal(rgb: &EmbeddedSet, depth: &EmbeddedSet, protocol: &ProtocolSpec) -> Result<[EvalResult; 2]> {
    if rgb.is_empty() || depth.is_empty() {
        return Err(Error::Precondition("cross-modal evaluation needs both modalities".into()));
    }
    Ok([
        evaluate_sets(rgb, depth, protocol, Direction::QRgbGDepth)?,
        evaluate_sets(depth, rgb, protocol, Direction::QDepthGRgb)?,
    ])
}

/// Mean and population standard deviation across folds.
pub fn aggregate_folds(results: &[EvalResult]) -> Result<EvalResult> {
    let first = results
        .first()
        .ok_or_else(|| Error::Precondition("no fold results to aggregate".into()))?;
    for r in results {
        if r.direction != first.direction || !r.protocol.descriptor_eq(&first.protocol) {
            return Err(Error::Precondition(format!(
                "cannot aggregate {} / {:?} with {} / {:?}",
                r.direction, r.protocol, first.direction, first.protocol
            )));
        }
    }
    let folds: Vec<Metrics> = results.iter().map(|r| r.mean).collect();
    let n = results.len() as f64;
    let cmc = (0..first.cmc.len())
        .map(|k| results.iter().map(|r| r.cmc[k]).sum::<f64>() / n)
        .collect();
    Ok(EvalResult {
        direction: first.direction,
        protocol: first.protocol.clone(),
        mean: Metrics::mean_of(&folds),
        std: Metrics::std_of(&folds),
        per_fold: folds,
        per_repetition: Vec::new(),
        cmc,
        n_queries: results.iter().map(|r| r.n_queries).sum(),
        skipped_queries: results.iter().map(|r| r.skipped_queries).sum(),
        coupled_violations: results.iter().map(|r| r.coupled_violations).sum(),
    })
}
