//! Random instance builders shared by the integration tests.
#![allow(dead_code)]

use labo_core::baselines::Design;
use labo_core::bottleneck_model::ScoreMatrix;
use labo_core::submodular_select::{discriminability, ClassCandidates};
use labo_core::{EmbeddingMatrix, LabeledImageSet, Split};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> EmbeddingMatrix {
    let values = gaussian(rng, rows * dim).into_iter().map(|v| v as f32).collect();
    EmbeddingMatrix::new(rows, dim, values, false).unwrap()
}

/// Candidate pool of `size` random unit concepts with distinct, scattered ids
/// and discriminability computed from random positive class similarities.
pub fn random_candidates(rng: &mut ChaCha8Rng, n_classes: usize, size: usize, dim: usize) -> ClassCandidates {
    random_candidates_for(rng, 0, n_classes, size, dim)
}

pub fn random_candidates_for(
    rng: &mut ChaCha8Rng,
    class_id: usize,
    n_classes: usize,
    size: usize,
    dim: usize,
) -> ClassCandidates {
    let ids: Vec<u64> = sample(rng, 10_000, size).into_iter().map(|i| i as u64).collect();
    let emb = random_matrix(rng, size, dim).normalize_rows().unwrap();
    let disc = (0..size)
        .map(|_| {
            let sims: Vec<f64> = (0..n_classes).map(|_| rng.random_range(0.0..1.0)).collect();
            discriminability(&sims, 1e-8)
        })
        .collect();
    ClassCandidates::new(class_id, n_classes, ids, &emb, disc).unwrap()
}

pub fn random_scores(rng: &mut ChaCha8Rng, rows: usize, n_concepts: usize) -> ScoreMatrix {
    let values = gaussian(rng, rows * n_concepts).into_iter().map(|v| 0.5 * v).collect();
    ScoreMatrix::from_values(rows, n_concepts, values)
}

pub fn random_labels(rng: &mut ChaCha8Rng, rows: usize, n_classes: usize) -> Vec<usize> {
    (0..rows).map(|_| rng.random_range(0..n_classes)).collect()
}

pub fn random_design(rng: &mut ChaCha8Rng, rows: usize, dim: usize, n_classes: usize) -> Design {
    Design {
        rows,
        dim,
        n_classes,
        x: gaussian(rng, rows * dim),
        y: random_labels(rng, rows, n_classes),
    }
}

/// Gaussian class clusters around random means; `spread` scales the noise.
pub fn clustered_set(
    rng: &mut ChaCha8Rng,
    means: &[Vec<f64>],
    per_class: usize,
    spread: f64,
    split: Split,
) -> LabeledImageSet {
    let dim = means[0].len();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            let noise = gaussian(rng, dim);
            values.extend(mean.iter().zip(&noise).map(|(m, e)| (m + spread * e) as f32));
            labels.push(class);
        }
    }
    let emb = EmbeddingMatrix::new(labels.len(), dim, values, false).unwrap();
    LabeledImageSet::new(emb, labels, split, means.len()).unwrap()
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Central differences of `f` at `x` with step `h`.
pub fn finite_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|j| {
            probe[j] = x[j] + h;
            let up = f(&probe);
            probe[j] = x[j] - h;
            let down = f(&probe);
            probe[j] = x[j];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::with_capacity(k), &mut out);
    out
}
