//! Dual k-NN memories and the temperature-scaled likelihood-ratio score.
//!
//! For a query embedding `f` and a memory `M`, the log-density estimate is
//!
//! ```text
//! l(f; M) = log sum_{i=1..k'} exp(cos(f, n_i) / T) - log k'
//! ```
//!
//! over the `k' = min(k, |M|)` nearest rows `n_i` by cosine similarity. The
//! filter statistic is `lambda = l(f; M-) - l(f; M+)`; larger means more
//! background-like. As `T -> 0` the sum is dominated by its largest term and
//! `T * lambda` tends to the max-cosine gap `max cos(f, M-) - max cos(f, M+)`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{EmbeddingMatrix, Label, LabeledProposal};
use crate::error::{Error, Result};

pub const DEFAULT_K: usize = 25;
pub const DEFAULT_TEMPERATURE: f64 = 0.05;
pub const DEFAULT_SPLIT_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrtParams {
    pub k: usize,
    pub temperature: f64,
}

impl Default for LrtParams {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

impl LrtParams {
    pub fn new(k: usize, temperature: f64) -> Result<Self> {
        let p = Self { k, temperature };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidParameter("k must be at least 1".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Inner product accumulated in f64. On unit rows this is the cosine.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] as f64 * y[0] as f64;
        acc[1] += x[1] as f64 * y[1] as f64;
        acc[2] += x[2] as f64 * y[2] as f64;
        acc[3] += x[3] as f64 * y[3] as f64;
    }
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `log(sum(exp(v)))` with max subtraction. Returns `-inf` on empty input.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub cosine: f64,
}

fn neighbor_order(a: &Neighbor, b: &Neighbor) -> std::cmp::Ordering {
    b.cosine
        .total_cmp(&a.cosine)
        .then_with(|| a.index.cmp(&b.index))
}

/// The `min(k, |memory|)` most similar rows, most similar first. Equal
/// similarities are ordered by ascending row index.
pub fn nearest_neighbors(query: &[f32], memory: &EmbeddingMatrix, k: usize) -> Vec<Neighbor> {
    let mut all: Vec<Neighbor> = memory
        .rows()
        .enumerate()
        .map(|(index, row)| Neighbor {
            index,
            cosine: dot(query, row),
        })
        .collect();
    let k = k.min(all.len());
    if k == 0 {
        return Vec::new();
    }
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, neighbor_order);
        all.truncate(k);
    }
    all.sort_unstable_by(neighbor_order);
    all
}

/// Temperature-scaled k-NN log-density of `query` under `memory`.
pub fn knn_logdensity(query: &[f32], memory: &EmbeddingMatrix, params: &LrtParams) -> Result<f64> {
    if memory.is_empty() {
        return Err(Error::InsufficientData("empty memory".into()));
    }
    if query.len() != memory.dim() {
        return Err(Error::InvalidParameter(format!(
            "query dim {} does not match memory dim {}",
            query.len(),
            memory.dim()
        )));
    }
    let neighbors = nearest_neighbors(query, memory, params.k);
    let scaled: Vec<f64> = neighbors
        .iter()
        .map(|n| n.cosine / params.temperature)
        .collect();
    Ok(log_sum_exp(&scaled) - (scaled.len() as f64).ln())
}

/// Where a memory came from. Proposal ids are kept so that disjointness of the
/// positive memory and the threshold positives can be audited.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub split_id: String,
    pub split_fraction: f64,
    pub seed: u64,
    pub positive_ids: Vec<String>,
    pub negative_ids: Vec<String>,
    pub threshold_ids: Vec<String>,
}

/// Immutable positive/negative reference sets plus the held-out positives
/// used to pick the threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct DualMemory {
    positive: EmbeddingMatrix,
    negative: EmbeddingMatrix,
    threshold_positives: EmbeddingMatrix,
    provenance: Provenance,
}

impl DualMemory {
    /// Assembles a memory from explicit row sets.
    pub fn from_parts(
        positive: EmbeddingMatrix,
        negative: EmbeddingMatrix,
        threshold_positives: EmbeddingMatrix,
        provenance: Provenance,
    ) -> Result<Self> {
        let dim = positive.dim();
        if negative.dim() != dim || threshold_positives.dim() != dim {
            return Err(Error::InvalidParameter(format!(
                "memory dims disagree: {} / {} / {}",
                dim,
                negative.dim(),
                threshold_positives.dim()
            )));
        }
        Ok(Self {
            positive,
            negative,
            threshold_positives,
            provenance,
        })
    }

    pub fn positive(&self) -> &EmbeddingMatrix {
        &self.positive
    }

    pub fn negative(&self) -> &EmbeddingMatrix {
        &self.negative
    }

    pub fn threshold_positives(&self) -> &EmbeddingMatrix {
        &self.threshold_positives
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn dim(&self) -> usize {
        self.positive.dim()
    }

    /// Likelihood-ratio statistic of every threshold positive, in stored order.
    pub fn threshold_scores(&self, params: &LrtParams) -> Result<Vec<f64>> {
        score_rows(&self.threshold_positives, self, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = MemoryHeader {
            format: MEMORY_FORMAT.into(),
            version: 1,
            dim: self.dim(),
            positive: self.positive.count(),
            negative: self.negative.count(),
            threshold: self.threshold_positives.count(),
            provenance: self.provenance.clone(),
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut line = serde_json::to_vec(&header).expect("header serialization is infallible");
        line.push(b'\n');
        let io = |e| Error::io(path, e);
        w.write_all(&line).map_err(io)?;
        for m in [&self.positive, &self.negative, &self.threshold_positives] {
            w.write_all(&m.to_bytes()).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Embedding("memory file has no header line".into()))?;
        let header: MemoryHeader = serde_json::from_slice(&bytes[..newline])
            .map_err(|e| Error::Embedding(format!("memory header: {e}")))?;
        if header.format != MEMORY_FORMAT || header.version != 1 {
            return Err(Error::Embedding(format!(
                "unsupported memory file {} v{}",
                header.format, header.version
            )));
        }
        let mut offset = newline + 1;
        let mut next = |expected: usize, name: &str| -> Result<EmbeddingMatrix> {
            let (m, used) = EmbeddingMatrix::from_bytes(&bytes[offset..])?;
            offset += used;
            if m.count() != expected || m.dim() != header.dim {
                return Err(Error::Embedding(format!(
                    "{name} block is {}x{}, header says {expected}x{}",
                    m.count(),
                    m.dim(),
                    header.dim
                )));
            }
            Ok(m)
        };
        let positive = next(header.positive, "positive")?;
        let negative = next(header.negative, "negative")?;
        let threshold = next(header.threshold, "threshold")?;
        if offset != bytes.len() {
            return Err(Error::Embedding("trailing bytes in memory file".into()));
        }
        Self::from_parts(positive, negative, threshold, header.provenance)
    }
}

const MEMORY_FORMAT: &str = "dualmem-memory";

#[derive(Debug, Serialize, Deserialize)]
struct MemoryHeader {
    format: String,
    version: u32,
    dim: usize,
    positive: usize,
    negative: usize,
    threshold: usize,
    provenance: Provenance,
}

/// Splits labeled calibration proposals into the positive memory, threshold
/// positives and negative memory.
///
/// Positives are shuffled with a seeded ChaCha8 stream; the first
/// `round(split_fraction * n)` (clamped to `1..n`) form the memory and the
/// rest are held out. Every `neg` proposal enters the negative memory.
/// Proposals labeled `known_as_unknown` or `amb` are ignored.
pub fn build_memory(
    calibration: &[LabeledProposal],
    embeddings: &EmbeddingMatrix,
    split_fraction: f64,
    seed: u64,
) -> Result<DualMemory> {
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "split fraction must lie in (0, 1), got {split_fraction}"
        )));
    }
    let row_of = |p: &LabeledProposal| -> Result<usize> {
        let idx = p
            .proposal
            .embedding_index
            .ok_or_else(|| Error::MissingEmbedding(p.proposal.id.clone()))?;
        if idx >= embeddings.count() {
            return Err(Error::Embedding(format!(
                "proposal {} has embedding_index {idx} but matrix has {} rows",
                p.proposal.id,
                embeddings.count()
            )));
        }
        Ok(idx)
    };

    let positives: Vec<&LabeledProposal> = calibration
        .iter()
        .filter(|p| p.label == Label::Pos)
        .collect();
    let negatives: Vec<&LabeledProposal> = calibration
        .iter()
        .filter(|p| p.label == Label::Neg)
        .collect();
    if positives.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 calibration positives to form memory and threshold subsets, found {}",
            positives.len()
        )));
    }
    if negatives.is_empty() {
        return Err(Error::InsufficientData("no calibration negatives".into()));
    }

    let n = positives.len();
    let n_mem = ((split_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (mem_part, thr_part) = order.split_at(n_mem);
    let mut mem_part = mem_part.to_vec();
    let mut thr_part = thr_part.to_vec();
    mem_part.sort_unstable();
    thr_part.sort_unstable();

    let collect = |items: &[&LabeledProposal]| -> Result<(EmbeddingMatrix, Vec<String>)> {
        let rows = items
            .iter()
            .map(|p| row_of(p))
            .collect::<Result<Vec<_>>>()?;
        let ids = items.iter().map(|p| p.proposal.id.clone()).collect();
        Ok((embeddings.select(&rows), ids))
    };
    let pick = |idx: &[usize]| idx.iter().map(|&i| positives[i]).collect::<Vec<_>>();
    let (positive, positive_ids) = collect(&pick(&mem_part))?;
    let (threshold_positives, threshold_ids) = collect(&pick(&thr_part))?;
    let (negative, negative_ids) = collect(&negatives)?;

    DualMemory::from_parts(
        positive,
        negative,
        threshold_positives,
        Provenance {
            split_id: "calibration".into(),
            split_fraction,
            seed,
            positive_ids,
            negative_ids,
            threshold_ids,
        },
    )
}

/// `lambda = l(query; M-) - l(query; M+)`.
pub fn lrt_score(query: &[f32], mem: &DualMemory, params: &LrtParams) -> Result<f64> {
    Ok(knn_logdensity(query, mem.negative(), params)?
        - knn_logdensity(query, mem.positive(), params)?)
}

/// Scores every row of `queries` in parallel, preserving order.
pub fn score_rows(
    queries: &EmbeddingMatrix,
    mem: &DualMemory,
    params: &LrtParams,
) -> Result<Vec<f64>> {
    params.validate()?;
    (0..queries.count())
        .into_par_iter()
        .map(|i| lrt_score(queries.row(i), mem, params))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Concat,
    Average,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(FusionMode::Concat),
            "average" | "avg" => Ok(FusionMode::Average),
            other => Err(Error::InvalidParameter(format!(
                "unknown fusion mode {other:?}"
            ))),
        }
    }
}

/// Combines two critics row by row. Both modes L2-renormalize the result.
pub fn fuse_embeddings(
    a: &EmbeddingMatrix,
    b: &EmbeddingMatrix,
    mode: FusionMode,
) -> Result<EmbeddingMatrix> {
    if a.count() != b.count() {
        return Err(Error::InvalidParameter(format!(
            "row count mismatch: {} vs {}",
            a.count(),
            b.count()
        )));
    }
    match mode {
        FusionMode::Concat => {
            let dim = a.dim() + b.dim();
            let mut data = Vec::with_capacity(a.count() * dim);
            for (ra, rb) in a.rows().zip(b.rows()) {
                data.extend_from_slice(ra);
                data.extend_from_slice(rb);
            }
            EmbeddingMatrix::normalized(dim, data)
        }
        FusionMode::Average => {
            if a.dim() != b.dim() {
                return Err(Error::InvalidParameter(format!(
                    "average fusion needs equal dims, got {} and {}",
                    a.dim(),
                    b.dim()
                )));
            }
            let data = a
                .as_slice()
                .iter()
                .zip(b.as_slice())
                .map(|(&x, &y)| ((x as f64 + y as f64) / 2.0) as f32)
                .collect();
            EmbeddingMatrix::normalized(a.dim(), data)
        }
    }
}
