//! Comparison filters: objectness thresholding and the k-means prototype rule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{EmbeddingMatrix, ProposalRecord, Stream};
use crate::error::{Error, Result};
use crate::filtering::{embedding_row, FilterDecision, PrototypeEvidence};
use crate::memory::{dot, DualMemory};

pub const DEFAULT_POSITIVE_CENTROIDS: usize = 16;
pub const DEFAULT_NEGATIVE_CENTROIDS: usize = 64;
pub const DEFAULT_TAU_COS: f64 = 0.80;
pub const DEFAULT_OBJECTNESS_THRESHOLD: f64 = 0.60;
pub const DEFAULT_KMEANS_ITERS: usize = 100;

/// Keeps unknown proposals with `objectness >= threshold`.
pub fn objectness_filter(proposals: &[ProposalRecord], threshold: f64) -> Vec<FilterDecision> {
    proposals
        .iter()
        .map(|p| match p.stream {
            Stream::Known => FilterDecision::bypass(p.id.clone()),
            Stream::Unknown => FilterDecision {
                id: p.id.clone(),
                stream: Stream::Unknown,
                lambda: None,
                tau: None,
                suppressed: p.objectness < threshold,
                label: None,
                prototype: None,
            },
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centroids: EmbeddingMatrix,
    pub assignments: Vec<usize>,
    /// Objective `sum(1 - cos)` after each assignment step.
    pub objective: Vec<f64>,
    pub converged: bool,
}

fn normalize(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 1e-12 && n.is_finite() {
        v.iter_mut().for_each(|x| *x /= n);
        true
    } else {
        false
    }
}

fn cos64(row: &[f32], c: &[f64]) -> f64 {
    row.iter().zip(c).map(|(&a, &b)| a as f64 * b).sum()
}

fn best_centroid(row: &[f32], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let s = cos64(row, c);
        if s > best.1 {
            best = (j, s);
        }
    }
    best
}

fn kmeans_plus_plus(rows: &EmbeddingMatrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = rows.count();
    let to64 = |i: usize| -> Vec<f64> { rows.row(i).iter().map(|&v| v as f64).collect() };
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![to64(first)];
    let mut dist: Vec<f64> = (0..n)
        .map(|i| (1.0 - cos64(rows.row(i), &centroids[0])).max(0.0))
        .collect();
    while centroids.len() < k {
        let weights: Vec<f64> = (0..n)
            .map(|i| if chosen[i] { 0.0 } else { dist[i] * dist[i] })
            .collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, w) in weights.iter().enumerate() {
                if *w > 0.0 {
                    pick = Some(i);
                    if u < *w {
                        break;
                    }
                    u -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            // every remaining row duplicates a chosen centre
            (0..n).find(|&i| !chosen[i]).expect("rows >= k")
        };
        chosen[pick] = true;
        let c = to64(pick);
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min((1.0 - cos64(rows.row(i), &c)).max(0.0));
        }
        centroids.push(c);
    }
    centroids
}

/// Spherical k-means: seeded k-means++ initialization, Lloyd iterations with
/// renormalized centroids, and empty clusters re-seeded from the point
/// farthest from its centroid.
pub fn kmeans(rows: &EmbeddingMatrix, k: usize, seed: u64, max_iters: usize) -> Result<KMeans> {
    let n = rows.count();
    if k == 0 || max_iters == 0 {
        return Err(Error::InvalidParameter(
            "k and max_iters must be positive".into(),
        ));
    }
    if n < k {
        return Err(Error::InsufficientData(format!(
            "k-means with k={k} on {n} rows"
        )));
    }
    let dim = rows.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_plus_plus(rows, k, &mut rng);
    let mut assignments = vec![usize::MAX; n];
    let mut objective = Vec::new();
    let mut converged = false;

    for iter in 0..max_iters {
        let best: Vec<(usize, f64)> = (0..n)
            .into_par_iter()
            .map(|i| best_centroid(rows.row(i), &centroids))
            .collect();
        objective.push(best.iter().map(|(_, s)| 1.0 - s).sum());
        let next: Vec<usize> = best.iter().map(|(j, _)| *j).collect();
        if next == assignments {
            converged = true;
            break;
        }
        assignments = next;
        if iter + 1 == max_iters {
            break;
        }

        let mut sizes = vec![0usize; k];
        for &a in &assignments {
            sizes[a] += 1;
        }
        for empty in (0..k).filter(|&j| sizes[j] == 0).collect::<Vec<_>>() {
            let far = (0..n)
                .filter(|&i| sizes[assignments[i]] > 1)
                .map(|i| (i, cos64(rows.row(i), &centroids[assignments[i]])))
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                .map(|(i, _)| i)
                .expect("some cluster has two or more members");
            sizes[assignments[far]] -= 1;
            sizes[empty] = 1;
            assignments[far] = empty;
        }

        let mut sums = vec![vec![0.0f64; dim]; k];
        for (i, &a) in assignments.iter().enumerate() {
            for (s, &v) in sums[a].iter_mut().zip(rows.row(i)) {
                *s += v as f64;
            }
        }
        for (c, mut s) in centroids.iter_mut().zip(sums) {
            if normalize(&mut s) {
                *c = s;
            }
        }
    }

    let data: Vec<f32> = centroids.iter().flatten().map(|&v| v as f32).collect();
    Ok(KMeans {
        centroids: EmbeddingMatrix::normalized(dim, data)?,
        assignments,
        objective,
        converged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrototypeConfig {
    pub positive_centroids: usize,
    pub negative_centroids: usize,
    pub tau_cos: f64,
    pub seed: u64,
    pub max_iters: usize,
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        Self {
            positive_centroids: DEFAULT_POSITIVE_CENTROIDS,
            negative_centroids: DEFAULT_NEGATIVE_CENTROIDS,
            tau_cos: DEFAULT_TAU_COS,
            seed: 0,
            max_iters: DEFAULT_KMEANS_ITERS,
        }
    }
}

/// Centroid-compressed memories for the prototype baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeMemory {
    pub positive_centroids: EmbeddingMatrix,
    pub negative_centroids: EmbeddingMatrix,
    pub tau_cos: f64,
}

impl PrototypeMemory {
    /// Compresses the memory rows of `mem` (threshold positives are not used).
    pub fn build(mem: &DualMemory, cfg: &PrototypeConfig) -> Result<Self> {
        let pos = kmeans(
            mem.positive(),
            cfg.positive_centroids,
            cfg.seed,
            cfg.max_iters,
        )?;
        let neg = kmeans(
            mem.negative(),
            cfg.negative_centroids,
            cfg.seed,
            cfg.max_iters,
        )?;
        Ok(Self {
            positive_centroids: pos.centroids,
            negative_centroids: neg.centroids,
            tau_cos: cfg.tau_cos,
        })
    }

    pub fn evidence(&self, query: &[f32]) -> PrototypeEvidence {
        let max_cos = |m: &EmbeddingMatrix| {
            m.rows()
                .map(|r| dot(query, r))
                .fold(f64::NEG_INFINITY, f64::max)
        };
        PrototypeEvidence {
            max_cos_negative: max_cos(&self.negative_centroids),
            max_cos_positive: max_cos(&self.positive_centroids),
            tau_cos: self.tau_cos,
        }
    }
}

/// Suppress iff the best negative centroid is at least `tau_cos` similar and
/// strictly more similar than the best positive centroid.
pub fn prototype_suppresses(e: &PrototypeEvidence) -> bool {
    e.max_cos_negative >= e.tau_cos && e.max_cos_negative > e.max_cos_positive
}

pub fn prototype_filter(
    proposals: &[ProposalRecord],
    embeddings: &EmbeddingMatrix,
    proto: &PrototypeMemory,
) -> Result<Vec<FilterDecision>> {
    proposals
        .par_iter()
        .map(|p| match p.stream {
            Stream::Known => Ok(FilterDecision::bypass(p.id.clone())),
            Stream::Unknown => {
                let e = proto.evidence(embedding_row(p, embeddings)?);
                Ok(FilterDecision {
                    id: p.id.clone(),
                    stream: Stream::Unknown,
                    lambda: None,
                    tau: None,
                    suppressed: prototype_suppresses(&e),
                    label: None,
                    prototype: Some(e),
                })
            }
        })
        .collect()
}
