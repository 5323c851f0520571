//! Batch samplers. Every sampler is a pure function of `(seed, epoch)`.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};
use crate::seed;

/// P identities x K images per batch.
///
/// Identities are drawn from a queue refilled with fresh permutations, so every
/// identity appears at least once per epoch. An epoch has
/// `max(ceil(ids / p), samples / (p k))` batches. Identities with fewer than
/// `k` images are sampled with replacement.
pub fn pk_sample_batches(labels: &[u32], p: usize, k: usize, seed_value: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if p == 0 || k == 0 {
        return Err(Error::Config("p and k must be positive".into()));
    }
    let mut by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_id.entry(l).or_default().push(i);
    }
    if by_id.len() < p {
        return Err(Error::Precondition(format!(
            "PK sampling needs at least {p} identities, found {}",
            by_id.len()
        )));
    }
    let ids: Vec<u32> = by_id.keys().copied().collect();
    let n_batches = ids.len().div_ceil(p).max(labels.len() / (p * k)).max(1);
    let mut rng = seed::rng_for(seed_value, "pk-sampler", &[epoch as u64]);
    let mut queue: VecDeque<u32> = VecDeque::new();
    let mut batches = Vec::with_capacity(n_batches);
    for _ in 0..n_batches {
        let mut chosen: Vec<u32> = Vec::with_capacity(p);
        let mut deferred = Vec::new();
        while chosen.len() < p {
            if queue.is_empty() {
                let mut perm = ids.clone();
                perm.shuffle(&mut rng);
                queue.extend(perm);
            }
            let id = queue.pop_front().expect("refilled");
            if chosen.contains(&id) {
                deferred.push(id);
            } else {
                chosen.push(id);
            }
        }
        for id in deferred.into_iter().rev() {
            queue.push_front(id);
        }
        let mut batch = Vec::with_capacity(p * k);
        for id in chosen {
            let pool = &by_id[&id];
            if pool.len() >= k {
                batch.extend(pool.choose_multiple(&mut rng, k).copied());
            } else {
                batch.extend((0..k).map(|_| pool[rng.random_range(0..pool.len())]));
            }
        }
        batches.push(batch);
    }
    Ok(batches)
}

fn shuffled(n: usize, batch_size: usize, rng: &mut impl Rng, emit_partial: bool) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size)
        .filter(|c| emit_partial || c.len() == batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Shuffled minibatches over `n` items.
pub fn shuffled_batches(n: usize, batch_size: usize, seed_value: u64, epoch: usize, emit_partial: bool) -> Result<Vec<Vec<usize>>> {
    if n == 0 || batch_size == 0 {
        return Err(Error::Precondition("shuffled batches need items and a positive batch size".into()));
    }
    let mut rng = seed::rng_for(seed_value, "shuffled-batches", &[epoch as u64]);
    Ok(shuffled(n, batch_size, &mut rng, emit_partial))
}

/// Batches over the pooled RGB and depth images. Positions `< n_rgb` refer to
/// RGB images, the rest to depth image `pos - n_rgb`.
pub fn mixed_modality_batches(
    n_rgb: usize,
    n_depth: usize,
    batch_size: usize,
    seed_value: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    if n_rgb == 0 || n_depth == 0 {
        return Err(Error::Precondition("mixed batches need both RGB and depth images".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut rng = seed::rng_for(seed_value, "mixed-batches", &[epoch as u64]);
    Ok(shuffled(n_rgb + n_depth, batch_size, &mut rng, true))
}

/// Batches of pair indices. Whether a final short batch is emitted is up to
/// `emit_partial`.
pub fn paired_batches(n_pairs: usize, batch_size: usize, seed_value: u64, epoch: usize, emit_partial: bool) -> Result<Vec<Vec<usize>>> {
    if n_pairs == 0 {
        return Err(Error::Precondition("no RGB-depth pairs to train on".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut rng = seed::rng_for(seed_value, "paired-batches", &[epoch as u64]);
    Ok(shuffled(n_pairs, batch_size, &mut rng, emit_partial))
}
