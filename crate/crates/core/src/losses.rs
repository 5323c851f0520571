//! Triplet (batch-hard), softmax cross-entropy and embedding-regression losses.
//!
//! All losses accept `f32` or `f64` tensors and return a scalar of the same
//! dtype.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LossKind {
    Triplet,
    /// Softmax over a classifier on top of the embedding layer.
    #[default]
    SoftmaxPrelim,
    /// Softmax directly on the embedding, which is the class-score layer.
    SoftmaxCls,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TripletConfig {
    pub margin: f64,
    /// Use squared Euclidean distances.
    pub squared: bool,
    /// `ln(1 + exp(x))` instead of `max(0, x)`.
    pub soft: bool,
}

impl Default for TripletConfig {
    fn default() -> Self {
        Self {
            margin: 0.3,
            squared: false,
            soft: false,
        }
    }
}

const DIST_EPS: f64 = 1e-12;

/// Pairwise distance matrix `[N, N]`. Differentiable.
pub fn pairwise_distances(emb: &Tensor, squared: bool) -> Result<Tensor> {
    let (n, d) = emb.dims2()?;
    let a = emb.unsqueeze(1)?.broadcast_as((n, n, d))?;
    let b = emb.unsqueeze(0)?.broadcast_as((n, n, d))?;
    let sq = (a - b)?.sqr()?.sum(2)?;
    Ok(if squared { sq } else { (sq + DIST_EPS)?.sqrt()? })
}

fn check_batch(emb: &Tensor, labels: &[u32]) -> Result<usize> {
    let (n, _) = emb.dims2()?;
    if n != labels.len() {
        return Err(Error::Shape(format!("{n} embeddings but {} labels", labels.len())));
    }
    Ok(n)
}

/// Hardest positive and hardest negative column per anchor.
pub fn mine_batch_hard(dist: &[Vec<f64>], labels: &[u32]) -> Result<(Vec<u32>, Vec<u32>)> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(Error::Precondition("triplet loss needs at least two identities per batch".into()));
    }
    if let Some((l, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::Precondition(format!(
            "identity {l} has a single sample in the batch; triplet loss needs positives"
        )));
    }
    let mut pos = Vec::with_capacity(labels.len());
    let mut neg = Vec::with_capacity(labels.len());
    for (i, row) in dist.iter().enumerate() {
        let mut hp: Option<(f64, usize)> = None;
        let mut hn: Option<(f64, usize)> = None;
        for (j, &d) in row.iter().enumerate() {
            if j == i {
                continue;
            }
            if labels[j] == labels[i] {
                if hp.is_none_or(|(b, _)| d > b) {
                    hp = Some((d, j));
                }
            } else if hn.is_none_or(|(b, _)| d < b) {
                hn = Some((d, j));
            }
        }
        pos.push(hp.expect("checked positives").1 as u32);
        neg.push(hn.expect("checked negatives").1 as u32);
    }
    Ok((pos, neg))
}

fn softplus(x: &Tensor) -> Result<Tensor> {
    // max(x, 0) + ln(1 + exp(-|x|))
    Ok((x.relu()? + ((x.abs()?.neg()?.exp()? + 1.0)?.log()?))?)
}

/// Batch-hard triplet loss averaged over anchors.
pub fn triplet_batch_hard(emb: &Tensor, labels: &[u32], cfg: &TripletConfig) -> Result<Tensor> {
    let n = check_batch(emb, labels)?;
    let dist = pairwise_distances(emb, cfg.squared)?;
    let host = dist.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let (pos, neg) = mine_batch_hard(&host, labels)?;
    let device = emb.device();
    let pos = Tensor::from_vec(pos, (n, 1), device)?;
    let neg = Tensor::from_vec(neg, (n, 1), device)?;
    let dp = dist.gather(&pos, 1)?;
    let dn = dist.gather(&neg, 1)?;
    let x = ((dp - dn)? + cfg.margin)?;
    let per = if cfg.soft { softplus(&x)? } else { x.relu()? };
    Ok(per.mean_all()?)
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    let n = check_batch(logits, labels)?;
    let c = logits.dim(1)?;
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= c) {
        return Err(Error::Precondition(format!("label {bad} out of range for {c} classes")));
    }
    let max = logits.max_keepdim(1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    let log_probs = shifted.broadcast_sub(&lse)?;
    let idx = Tensor::from_vec(labels.to_vec(), (n, 1), logits.device())?;
    Ok(log_probs.gather(&idx, 1)?.neg()?.mean_all()?)
}

/// `(1/N) sum_i ||teacher_i - student_i||^2`. No gradient flows to the teacher.
pub fn mse_distill(teacher: &Tensor, student: &Tensor) -> Result<Tensor> {
    if teacher.dims() != student.dims() || teacher.rank() != 2 {
        return Err(Error::Shape(format!(
            "teacher {:?} and student {:?} embeddings must be equal-shaped matrices",
            teacher.dims(),
            student.dims()
        )));
    }
    Ok((teacher.detach() - student)?.sqr()?.sum(1)?.mean_all()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use proptest::prelude::*;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::new(rows.to_vec(), &Device::Cpu).unwrap()
    }

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    // brute force over all (anchor, positive, negative) choices
    fn triplet_oracle(x: &[Vec<f64>], labels: &[u32], margin: f64) -> f64 {
        let n = x.len();
        let mut total = 0.0;
        for a in 0..n {
            let mut hp = f64::MIN;
            let mut hn = f64::MAX;
            for j in 0..n {
                if j == a {
                    continue;
                }
                let d = dist(&x[a], &x[j]);
                if labels[j] == labels[a] {
                    hp = hp.max(d);
                } else {
                    hn = hn.min(d);
                }
            }
            total += (hp - hn + margin).max(0.0);
        }
        total / n as f64
    }

    fn ce_oracle(z: &[Vec<f64>], labels: &[u32]) -> f64 {
        z.iter()
            .zip(labels)
            .map(|(row, &l)| {
                let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
                lse - row[l as usize]
            })
            .sum::<f64>()
            / z.len() as f64
    }

    fn finite_diff(f: impl Fn(&Tensor) -> f64, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let h = 1e-6;
        let mut g = vec![vec![0.0; x[0].len()]; x.len()];
        for i in 0..x.len() {
            for j in 0..x[0].len() {
                let mut p = x.to_vec();
                p[i][j] += h;
                let mut m = x.to_vec();
                m[i][j] -= h;
                g[i][j] = (f(&mat(&p)) - f(&mat(&m))) / (2.0 * h);
            }
        }
        g
    }

    fn analytic(loss: impl Fn(&Tensor) -> Tensor, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let v = Var::from_tensor(&mat(x)).unwrap();
        let grads = loss(v.as_tensor()).backward().unwrap();
        grads.get(v.as_tensor()).unwrap().to_vec2::<f64>().unwrap()
    }

    fn assert_close(a: &[Vec<f64>], b: &[Vec<f64>], tol: f64) {
        for (ra, rb) in a.iter().zip(b) {
            for (x, y) in ra.iter().zip(rb) {
                assert!((x - y).abs() < tol, "{x} vs {y}");
            }
        }
    }

    fn batch() -> (Vec<Vec<f64>>, Vec<u32>) {
        let x = vec![
            vec![0.1, 0.9, -0.3],
            vec![0.4, 0.2, 0.5],
            vec![-0.7, 0.3, 0.8],
            vec![0.6, -0.5, 0.1],
            vec![0.2, 0.1, -0.9],
            vec![-0.3, -0.6, 0.4],
        ];
        (x, vec![0, 0, 1, 1, 2, 2])
    }

    #[test]
    fn triplet_matches_oracle_and_finite_differences() {
        let (x, labels) = batch();
        let cfg = TripletConfig::default();
        let got = scalar(&triplet_batch_hard(&mat(&x), &labels, &cfg).unwrap());
        assert!((got - triplet_oracle(&x, &labels, 0.3)).abs() < 1e-9);
        let fd = finite_diff(|t| scalar(&triplet_batch_hard(t, &labels, &cfg).unwrap()), &x);
        let an = analytic(|t| triplet_batch_hard(t, &labels, &cfg).unwrap(), &x);
        assert_close(&an, &fd, 1e-5);
    }

    #[test]
    fn soft_triplet_gradients_match() {
        let (x, labels) = batch();
        let cfg = TripletConfig {
            soft: true,
            ..Default::default()
        };
        let fd = finite_diff(|t| scalar(&triplet_batch_hard(t, &labels, &cfg).unwrap()), &x);
        let an = analytic(|t| triplet_batch_hard(t, &labels, &cfg).unwrap(), &x);
        assert_close(&an, &fd, 1e-5);
    }

    #[test]
    fn triplet_preconditions() {
        let (x, _) = batch();
        let cfg = TripletConfig::default();
        assert!(matches!(
            triplet_batch_hard(&mat(&x), &[0, 0, 0, 0, 0, 0], &cfg),
            Err(Error::Precondition(_))
        ));
        assert!(matches!(
            triplet_batch_hard(&mat(&x), &[0, 0, 1, 1, 2, 3], &cfg),
            Err(Error::Precondition(_))
        ));
        assert!(triplet_batch_hard(&mat(&x), &[0, 0, 1], &cfg).is_err());
    }

    #[test]
    fn cross_entropy_matches_oracle_and_gradients() {
        let z = vec![vec![1.0, -2.0, 0.5, 3.0], vec![0.0, 0.1, -0.1, 0.2], vec![50.0, 49.0, -3.0, 0.0]];
        let labels = [3, 0, 1];
        let got = scalar(&cross_entropy(&mat(&z), &labels).unwrap());
        assert!((got - ce_oracle(&z, &labels)).abs() < 1e-9);
        let fd = finite_diff(|t| scalar(&cross_entropy(t, &labels).unwrap()), &z);
        let an = analytic(|t| cross_entropy(t, &labels).unwrap(), &z);
        assert_close(&an, &fd, 1e-5);
        assert!(cross_entropy(&mat(&z), &[0, 4, 1]).is_err());
    }

    #[test]
    fn cross_entropy_is_stable_for_large_logits() {
        let z = vec![vec![1e4, 0.0], vec![-1e4, 1e4]];
        let v = scalar(&cross_entropy(&mat(&z), &[0, 0]).unwrap());
        assert!(v.is_finite());
        assert!((v - 1e4).abs() < 1e-6);
    }

    #[test]
    fn mse_matches_definition_and_stops_teacher_gradient() {
        let t = vec![vec![1.0, 2.0], vec![0.0, -1.0], vec![3.0, 3.0]];
        let s = vec![vec![0.5, 2.0], vec![1.0, 1.0], vec![3.0, 2.0]];
        let got = scalar(&mse_distill(&mat(&t), &mat(&s)).unwrap());
        let oracle = (0.25 + 5.0 + 1.0) / 3.0;
        assert!((got - oracle).abs() < 1e-12);

        let tv = Var::from_tensor(&mat(&t)).unwrap();
        let sv = Var::from_tensor(&mat(&s)).unwrap();
        let grads = mse_distill(tv.as_tensor(), sv.as_tensor()).unwrap().backward().unwrap();
        assert!(grads.get(tv.as_tensor()).is_none());
        let gs = grads.get(sv.as_tensor()).unwrap().to_vec2::<f64>().unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert!((gs[i][j] - 2.0 * (s[i][j] - t[i][j]) / 3.0).abs() < 1e-12);
            }
        }
        assert!(mse_distill(&mat(&t), &mat(&s[..2])).is_err());
    }

    #[test]
    fn tied_positive_and_negative_give_the_margin() {
        // anchor 0 sees its positive and nearest negative at distance 1; the
        // other anchors are satisfied
        let x = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
        let l = scalar(&triplet_batch_hard(&mat(&x), &[0, 0, 1, 1], &TripletConfig::default()).unwrap());
        assert!((4.0 * l - 0.3).abs() < 1e-6, "{l}");
    }

    #[test]
    fn cross_entropy_decreases_with_the_true_class_margin() {
        let losses: Vec<f64> = [1.0, 5.0, 10.0]
            .iter()
            .map(|&m| scalar(&cross_entropy(&mat(&[vec![m, 0.0, 0.0]]), &[0]).unwrap()))
            .collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn f32_inputs_are_supported() {
        let (x, labels) = batch();
        let t = mat(&x).to_dtype(DType::F32).unwrap();
        let l = triplet_batch_hard(&t, &labels, &TripletConfig::default()).unwrap();
        assert_eq!(l.dtype(), DType::F32);
        assert!((scalar(&l) - triplet_oracle(&x, &labels, 0.3)).abs() < 1e-5);
    }

    fn labelled_batch() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<u32>)> {
        (2usize..5, 2usize..4, 1usize..5).prop_flat_map(|(p, k, d)| {
            let labels: Vec<u32> = (0..p as u32).flat_map(|l| std::iter::repeat_n(l, k)).collect();
            (prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), p * k), Just(labels))
        })
    }

    proptest! {
        #[test]
        fn triplet_agrees_with_oracle((x, labels) in labelled_batch(), margin in 0.0f64..1.0) {
            let cfg = TripletConfig { margin, ..Default::default() };
            let got = scalar(&triplet_batch_hard(&mat(&x), &labels, &cfg).unwrap());
            prop_assert!(got >= 0.0);
            // the oracle omits the distance epsilon
            prop_assert!((got - triplet_oracle(&x, &labels, margin)).abs() < 1e-5);
        }

        #[test]
        fn separated_clusters_have_zero_triplet_loss(p in 2usize..5, k in 2usize..4, seed in 0u64..1000) {
            let mut rng = crate::seed::rng(seed);
            let x: Vec<Vec<f64>> = (0..p * k)
                .map(|i| vec![(i / k) as f64 * 10.0 + rand::Rng::random_range(&mut rng, -0.1..0.1), 0.0])
                .collect();
            let labels: Vec<u32> = (0..p * k).map(|i| (i / k) as u32).collect();
            let got = scalar(&triplet_batch_hard(&mat(&x), &labels, &TripletConfig::default()).unwrap());
            prop_assert_eq!(got, 0.0);
        }

        #[test]
        fn cross_entropy_is_nonnegative_and_matches(
            z in prop::collection::vec(prop::collection::vec(-20.0f64..20.0, 4), 1..6),
            seed in 0u32..1000,
        ) {
            let labels: Vec<u32> = (0..z.len() as u32).map(|i| (i + seed) % 4).collect();
            let got = scalar(&cross_entropy(&mat(&z), &labels).unwrap());
            prop_assert!(got >= 0.0);
            prop_assert!((got - ce_oracle(&z, &labels)).abs() < 1e-9);
        }

        #[test]
        fn uniform_logits_give_log_classes(c in 2usize..50, v in -5.0f64..5.0) {
            let z = vec![vec![v; c]];
            let got = scalar(&cross_entropy(&mat(&z), &[0]).unwrap());
            prop_assert!((got - (c as f64).ln()).abs() < 1e-9);
        }

        #[test]
        fn triplet_is_translation_invariant((x, labels) in labelled_batch(), shift in -10.0f64..10.0) {
            let moved: Vec<Vec<f64>> = x.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect();
            let cfg = TripletConfig::default();
            let a = scalar(&triplet_batch_hard(&mat(&x), &labels, &cfg).unwrap());
            let b = scalar(&triplet_batch_hard(&mat(&moved), &labels, &cfg).unwrap());
            prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
        }

        #[test]
        fn mse_is_symmetric(
            x in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..5),
            d in prop::collection::vec(-2.0f64..2.0, 3),
        ) {
            let y: Vec<Vec<f64>> = x.iter().map(|r| r.iter().zip(&d).map(|(a, b)| a + b).collect()).collect();
            let a = scalar(&mse_distill(&mat(&x), &mat(&y)).unwrap());
            let b = scalar(&mse_distill(&mat(&y), &mat(&x)).unwrap());
            prop_assert_eq!(a, b);
        }

        #[test]
        fn mse_is_zero_iff_equal(x in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..5)) {
            prop_assert_eq!(scalar(&mse_distill(&mat(&x), &mat(&x)).unwrap()), 0.0);
            let mut y = x.clone();
            y[0][0] += 1.0;
            prop_assert!(scalar(&mse_distill(&mat(&x), &mat(&y)).unwrap()) > 0.0);
        }
    }
}
