//! Unsupervised domain discovery: deterministic context embeddings, seeded
//! k-means, and nearest-centroid assignment for unseen contexts.
//!
//! The embedding is a hashed bag of tokens: each distinct token hashes to a
//! fixed unit vector and a context embeds as the L2-normalized mean of its
//! token vectors. It is dependency-free and deterministic across runs and
//! platforms, which is all the synthetic corpora need.

use std::collections::BTreeMap;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Embedding width `e`.
pub const EMBED_DIM: usize = 64;

pub type ContextEmbedding = Vec<f64>;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn token_vector(token: &str) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()));
    let mut v: Vec<f64> = (0..EMBED_DIM).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in &mut v {
        *x /= norm;
    }
    v
}

/// Hash-seeded bag-of-tokens embedding. Empty contexts map to the zero
/// vector; everything else is unit-norm.
pub fn embed_context(context: &str) -> ContextEmbedding {
    let mut sum = vec![0.0; EMBED_DIM];
    let mut count = 0usize;
    for tok in context.to_lowercase().split_whitespace() {
        let tv = token_vector(tok);
        for (s, t) in sum.iter_mut().zip(tv.iter()) {
            *s += t;
        }
        count += 1;
    }
    if count == 0 {
        return sum;
    }
    for s in &mut sum {
        *s /= count as f64;
    }
    let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for s in &mut sum {
            *s /= norm;
        }
    }
    sum
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Trained clustering: centroids plus the assignment of every training
/// context id.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DomainModel {
    pub n: usize,
    pub seed: u64,
    pub e: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignments: BTreeMap<String, usize>,
}

impl DomainModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_reader(f)?)
    }
}

/// Index of the nearest centroid by Euclidean distance, smallest index on
/// ties.
pub fn assign_domain(embedding: &[f64], model: &DomainModel) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in model.centroids.iter().enumerate() {
        let d = sq_dist(embedding, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Lloyd's algorithm with seeded k-means++ initialization. Returns the model
/// plus the objective (sum of squared distances) after each iteration.
pub fn kmeans_trace(
    ids: &[String],
    points: &[ContextEmbedding],
    n: usize,
    seed: u64,
) -> Result<(DomainModel, Vec<f64>)> {
    if n == 0 {
        return Err(Error::Config("cluster count must be >= 1".into()));
    }
    if points.len() < n {
        return Err(Error::Config(format!(
            "{} points cannot form {n} clusters",
            points.len()
        )));
    }
    assert_eq!(ids.len(), points.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(n);
    centroids.push(points[rng.random_range(0..points.len())].clone());
    while centroids.len() < n {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centroids
                    .iter()
                    .map(|c| sq_dist(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            WeightedIndex::new(&d2).map_or(0, |w| w.sample(&mut rng))
        } else {
            // all points coincide with an existing centroid
            rng.random_range(0..points.len())
        };
        centroids.push(points[next].clone());
    }

    let mut assignments = vec![0usize; points.len()];
    let mut objective_trace = Vec::new();
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let d = sq_dist(p, centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
        }

        objective_trace.push(
            points
                .iter()
                .zip(&assignments)
                .map(|(p, &a)| sq_dist(p, &centroids[a]))
                .sum(),
        );

        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; n];
        let mut counts = vec![0usize; n];
        for (p, &a) in points.iter().zip(&assignments) {
            for (s, x) in sums[a].iter_mut().zip(p.iter()) {
                *s += x;
            }
            counts[a] += 1;
        }
        // distance of every point to its assigned centroid, for re-seeding
        // empty clusters from the farthest point
        let mut residuals: Vec<(usize, f64)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| (i, sq_dist(p, &centroids[assignments[i]])))
            .collect();
        residuals.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let mut next_far = residuals.into_iter().map(|(i, _)| i);

        for c in 0..n {
            if counts[c] == 0 {
                let far = next_far.next().unwrap();
                centroids[c] = points[far].clone();
            } else {
                for (ci, s) in centroids[c].iter_mut().zip(sums[c].iter()) {
                    *ci = s / counts[c] as f64;
                }
            }
        }

        if !changed && objective_trace.len() > 1 {
            break;
        }
    }

    let assignments_map = ids
        .iter()
        .cloned()
        .zip(assignments.iter().copied())
        .collect();
    Ok((
        DomainModel {
            n,
            seed,
            e: points[0].len(),
            centroids,
            assignments: assignments_map,
        },
        objective_trace,
    ))
}

/// Seeded k-means over context embeddings.
pub fn kmeans(
    ids: &[String],
    points: &[ContextEmbedding],
    n: usize,
    seed: u64,
) -> Result<DomainModel> {
    kmeans_trace(ids, points, n, seed).map(|(m, _)| m)
}

/// Ablation counterpart of [`kmeans`]: labels drawn uniformly with a seed.
/// Centroids are group means so nearest-centroid assignment still works.
pub fn random_domain_model(
    ids: &[String],
    points: &[ContextEmbedding],
    n: usize,
    seed: u64,
) -> Result<DomainModel> {
    if n == 0 {
        return Err(Error::Config("cluster count must be >= 1".into()));
    }
    if points.len() < n {
        return Err(Error::Config(format!(
            "{} points cannot form {n} clusters",
            points.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = points.iter().map(|_| rng.random_range(0..n)).collect();
    let dim = points[0].len();
    let mut centroids = vec![vec![0.0; dim]; n];
    let mut counts = vec![0usize; n];
    for (p, &l) in points.iter().zip(&labels) {
        for (c, x) in centroids[l].iter_mut().zip(p.iter()) {
            *c += x;
        }
        counts[l] += 1;
    }
    for (c, &count) in centroids.iter_mut().zip(&counts) {
        if count > 0 {
            for x in c.iter_mut() {
                *x /= count as f64;
            }
        }
    }
    Ok(DomainModel {
        n,
        seed,
        e: dim,
        centroids,
        assignments: ids.iter().cloned().zip(labels).collect(),
    })
}

/// Embed and cluster the contexts of a training split.
pub fn cluster_contexts(
    examples: &[crate::data::QAExample],
    n: usize,
    seed: u64,
) -> Result<DomainModel> {
    let ids: Vec<String> = examples.iter().map(|e| e.id.clone()).collect();
    let points: Vec<ContextEmbedding> = examples
        .iter()
        .map(|e| embed_context(&e.context))
        .collect();
    kmeans(&ids, &points, n, seed)
}

/// Adjusted Rand index between two labelings.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    if n == 0 {
        return 1.0;
    }
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0usize; kb]; ka];
    for (&x, &y) in a.iter().zip(b.iter()) {
        table[x][y] += 1;
    }
    let choose2 = |x: usize| (x * x.saturating_sub(1)) as f64 / 2.0;
    let sum_ij: f64 = table.iter().flatten().map(|&c| choose2(c)).sum();
    let sum_a: f64 = table.iter().map(|row| choose2(row.iter().sum())).sum();
    let sum_b: f64 = (0..kb)
        .map(|j| choose2(table.iter().map(|row| row[j]).sum()))
        .sum();
    let total = choose2(n);
    let expected = sum_a * sum_b / total;
    let max_index = (sum_a + sum_b) / 2.0;
    if (max_index - expected).abs() < 1e-12 {
        return 1.0;
    }
    (sum_ij - expected) / (max_index - expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    #[test]
    fn embedding_is_deterministic_and_unit_norm() {
        let a = embed_context("the quick brown fox");
        let b = embed_context("the quick brown fox");
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_context_embeds_to_zero() {
        let z = embed_context("");
        assert_eq!(z.len(), EMBED_DIM);
        assert!(z.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn embedding_matches_independent_reimplementation() {
        // straight-line re-implementation of the hash-draw-mean pipeline
        let reimpl = |ctx: &str| -> Vec<f64> {
            let toks: Vec<String> = ctx.to_lowercase().split_whitespace().map(String::from).collect();
            let mut acc = vec![0.0f64; EMBED_DIM];
            for t in &toks {
                let mut h: u64 = 0xcbf29ce484222325;
                for &bb in t.as_bytes() {
                    h ^= bb as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
                let mut rng = ChaCha8Rng::seed_from_u64(h);
                let mut v: Vec<f64> =
                    (0..EMBED_DIM).map(|_| rng.sample(StandardNormal)).collect();
                let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= nv);
                for (a, b) in acc.iter_mut().zip(v.iter()) {
                    *a += b;
                }
            }
            acc.iter_mut().for_each(|x| *x /= toks.len() as f64);
            let n = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
            acc.iter_mut().for_each(|x| *x /= n);
            acc
        };
        let cos = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

        let (e1, e2) = (embed_context("a b"), embed_context("c d"));
        let (o1, o2) = (reimpl("a b"), reimpl("c d"));
        assert!((cos(&e1, &e2) - cos(&o1, &o2)).abs() < 1e-12);
    }

    fn blobs(seed: u64, per: usize) -> (Vec<ContextEmbedding>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for k in 0..3usize {
            for _ in 0..per {
                let mut p = vec![0.0; EMBED_DIM];
                p[k] = 10.0;
                for x in p.iter_mut() {
                    let noise: f64 = rng.sample(StandardNormal);
                    *x += 0.05 * noise;
                }
                points.push(p);
                labels.push(k);
            }
        }
        (points, labels)
    }

    #[test]
    fn kmeans_singleton_cluster_is_the_mean() {
        let points = vec![vec![0.0, 2.0], vec![2.0, 0.0]];
        let model = kmeans(&ids(2), &points, 1, 7).unwrap();
        assert!(model.assignments.values().all(|&a| a == 0));
        assert_eq!(model.centroids[0], vec![1.0, 1.0]);
    }

    #[test]
    fn kmeans_recovers_planted_blobs() {
        let (points, planted) = blobs(11, 30);
        let model = kmeans(&ids(points.len()), &points, 3, 5).unwrap();
        let got: Vec<usize> = (0..points.len())
            .map(|i| model.assignments[&format!("p{i}")])
            .collect();
        assert_eq!(adjusted_rand_index(&got, &planted), 1.0);
    }

    #[test]
    fn kmeans_is_deterministic() {
        let (points, _) = blobs(13, 20);
        let a = kmeans(&ids(points.len()), &points, 3, 9).unwrap();
        let b = kmeans(&ids(points.len()), &points, 3, 9).unwrap();
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.centroids, b.centroids);
    }

    #[test]
    fn kmeans_objective_non_increasing() {
        let (points, _) = blobs(17, 25);
        let (_, trace) = kmeans_trace(&ids(points.len()), &points, 3, 3).unwrap();
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "objective increased: {:?}", w);
        }
    }

    #[test]
    fn kmeans_rejects_too_few_points() {
        let points = vec![vec![0.0; 4]; 2];
        assert!(matches!(
            kmeans(&ids(2), &points, 3, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn assignment_identity_and_tiebreak() {
        let model = DomainModel {
            n: 3,
            seed: 0,
            e: 2,
            centroids: vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![5.0, 5.0]],
            assignments: BTreeMap::new(),
        };
        assert_eq!(assign_domain(&[5.0, 5.0], &model), 2);
        // equidistant from centroids 0 and 1 -> smallest index
        assert_eq!(assign_domain(&[1.0, 0.0], &model), 0);
    }

    #[test]
    fn training_points_map_to_their_assignments() {
        let (points, _) = blobs(19, 15);
        let model = kmeans(&ids(points.len()), &points, 3, 23).unwrap();
        for (i, p) in points.iter().enumerate() {
            assert_eq!(
                assign_domain(p, &model),
                model.assignments[&format!("p{i}")]
            );
        }
    }

    #[test]
    fn random_assignment_is_seeded() {
        let (points, _) = blobs(29, 10);
        let a = random_domain_model(&ids(points.len()), &points, 3, 1).unwrap();
        let b = random_domain_model(&ids(points.len()), &points, 3, 1).unwrap();
        assert_eq!(a.assignments, b.assignments);
        assert!(a.assignments.values().all(|&l| l < 3));
        let c = random_domain_model(&ids(points.len()), &points, 3, 2).unwrap();
        assert_ne!(a.assignments, c.assignments);
    }

    #[test]
    fn model_json_roundtrip() {
        let (points, _) = blobs(31, 10);
        let model = kmeans(&ids(points.len()), &points, 3, 77).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("domains.json");
        model.save(&path).unwrap();
        let loaded = DomainModel::load(&path).unwrap();
        assert_eq!(loaded.n, model.n);
        assert_eq!(loaded.assignments, model.assignments);
        assert_eq!(loaded.centroids, model.centroids);
    }

    #[test]
    fn ari_extremes() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        let perfect = adjusted_rand_index(&[0, 1, 2, 0, 1, 2], &[0, 1, 2, 0, 1, 2]);
        assert_eq!(perfect, 1.0);
    }
}
