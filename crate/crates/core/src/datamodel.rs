//! Domain types and the interchange formats.
//!
//! Record streams (proposals, ground truth, decisions) are JSON lines. Embeddings
//! live in a separate little-endian binary matrix:
//!
//! ```text
//! offset  size        field
//! 0       4           magic "DMEM"
//! 4       4           u32 version (= 1)
//! 8       4           u32 dim
//! 12      8           u64 count
//! 20      count*dim*4 f32 rows, row-major
//! ```

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filtering::FilterDecision;

pub const EMBEDDING_MAGIC: [u8; 4] = *b"DMEM";
pub const EMBEDDING_VERSION: u32 = 1;
pub const EMBEDDING_HEADER_LEN: usize = 20;

/// Rows whose norm deviates from 1 by more than this are rejected on load.
pub const NORM_REJECT_TOLERANCE: f64 = 1e-1;
/// Rows are guaranteed to be within this distance of unit norm after load.
pub const NORM_TOLERANCE: f64 = 1e-3;
// Rows closer than this to unit norm are kept bit-for-bit.
const NORM_KEEP_TOLERANCE: f64 = 1e-6;

/// Axis-aligned box in corner format, pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox(format!(
                "non-finite coordinate in [{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(Error::InvalidBox(format!(
                "degenerate bbox [{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Unknown,
    Known,
}

/// One detector prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub id: String,
    pub image_id: String,
    pub bbox: BBox,
    pub objectness: f64,
    pub stream: Stream,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_index: Option<usize>,
}

impl ProposalRecord {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.objectness) {
            return Err(Error::ObjectnessOutOfRange(self.objectness));
        }
        Ok(())
    }

    pub fn is_unknown(&self) -> bool {
        self.stream == Stream::Unknown
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Known,
    Future,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub image_id: String,
    pub bbox: BBox,
    pub category: Category,
}

/// Four-way label of an unknown-stream prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Pos,
    KnownAsUnknown,
    Neg,
    Amb,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::Pos, Label::KnownAsUnknown, Label::Neg, Label::Amb];

    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Pos => "pos",
            Label::KnownAsUnknown => "known_as_unknown",
            Label::Neg => "neg",
            Label::Amb => "amb",
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A proposal with its label and the IoU maxima the label was derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledProposal {
    #[serde(flatten)]
    pub proposal: ProposalRecord,
    pub label: Label,
    pub max_iou_future: f64,
    pub max_iou_known: f64,
}

/// Dense row-major matrix of unit-norm embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    /// Builds a matrix and applies the ingestion norm policy: rows within
    /// [`NORM_REJECT_TOLERANCE`] of unit norm are renormalized, others rejected.
    pub fn from_rows(dim: usize, mut data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Embedding("dim must be positive".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::Embedding(format!(
                "data length {} is not a multiple of dim {dim}",
                data.len()
            )));
        }
        for (row_idx, row) in data.chunks_exact_mut(dim).enumerate() {
            normalize_row(row_idx, row)?;
        }
        Ok(Self { dim, data })
    }

    /// Builds a matrix by L2-normalizing arbitrary nonzero rows.
    pub fn normalized(dim: usize, mut data: Vec<f32>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::Embedding(format!(
                "data length {} incompatible with dim {dim}",
                data.len()
            )));
        }
        for (row_idx, row) in data.chunks_exact_mut(dim).enumerate() {
            let norm = l2_norm(row);
            if !(norm.is_finite() && norm > 0.0) {
                return Err(Error::EmbeddingNorm {
                    row: row_idx,
                    norm: norm as f32,
                });
            }
            row.iter_mut().for_each(|v| *v = (*v as f64 / norm) as f32);
        }
        Ok(Self { dim, data })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, i: usize) -> Option<&[f32]> {
        (i < self.count()).then(|| self.row(i))
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Copies the given rows, in order, into a new matrix.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            dim: self.dim,
            data,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(EMBEDDING_HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(&EMBEDDING_MAGIC);
        out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.count() as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses one matrix from the front of `bytes`, returning it together with
    /// the number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < EMBEDDING_HEADER_LEN {
            return Err(Error::Embedding("truncated header".into()));
        }
        if bytes[0..4] != EMBEDDING_MAGIC {
            return Err(Error::Embedding(format!(
                "bad magic {:02x?}, expected \"DMEM\"",
                &bytes[0..4]
            )));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != EMBEDDING_VERSION {
            return Err(Error::Embedding(format!(
                "version mismatch: found {version}, expected {EMBEDDING_VERSION}"
            )));
        }
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        if dim == 0 {
            return Err(Error::Embedding("dim must be positive".into()));
        }
        let payload = usize::try_from(count)
            .ok()
            .and_then(|c| c.checked_mul(dim))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Embedding("payload size overflows".into()))?;
        let end = EMBEDDING_HEADER_LEN + payload;
        if bytes.len() < end {
            return Err(Error::Embedding(format!(
                "truncated payload: expected {payload} bytes, found {}",
                bytes.len() - EMBEDDING_HEADER_LEN
            )));
        }
        let data = bytes[EMBEDDING_HEADER_LEN..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((Self::from_rows(dim, data)?, end))
    }
}

fn l2_norm(row: &[f32]) -> f64 {
    row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt()
}

fn normalize_row(row_idx: usize, row: &mut [f32]) -> Result<()> {
    let norm = l2_norm(row);
    let deviation = (norm - 1.0).abs();
    if deviation.is_nan() || deviation > NORM_REJECT_TOLERANCE {
        return Err(Error::EmbeddingNorm {
            row: row_idx,
            norm: norm as f32,
        });
    }
    if deviation > NORM_KEEP_TOLERANCE {
        row.iter_mut().for_each(|v| *v = (*v as f64 / norm) as f32);
    }
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<'a, T, I>(path: &Path, items: I) -> Result<()>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("record serialization is infallible");
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn record_error(path: &Path, line: usize, err: Error) -> Error {
    Error::Record {
        path: path.to_path_buf(),
        line,
        message: err.to_string(),
    }
}

/// Loads and validates a proposal stream. Line numbers in errors are 1-based.
pub fn load_proposals(path: &Path) -> Result<Vec<ProposalRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ProposalRecord = serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        rec.validate().map_err(|e| record_error(path, line_no, e))?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::Record {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("duplicate id {:?}", rec.id),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn save_proposals(proposals: &[ProposalRecord], path: &Path) -> Result<()> {
    write_jsonl(path, proposals)
}

pub fn load_groundtruth(path: &Path) -> Result<Vec<GroundTruthBox>> {
    read_jsonl(path)
}

pub fn save_groundtruth(boxes: &[GroundTruthBox], path: &Path) -> Result<()> {
    write_jsonl(path, boxes)
}

pub fn load_labeled(path: &Path) -> Result<Vec<LabeledProposal>> {
    read_jsonl(path)
}

pub fn save_labeled(labeled: &[LabeledProposal], path: &Path) -> Result<()> {
    write_jsonl(path, labeled)
}

pub fn load_decisions(path: &Path) -> Result<Vec<FilterDecision>> {
    read_jsonl(path)
}

pub fn save_decisions(decisions: &[FilterDecision], path: &Path) -> Result<()> {
    write_jsonl(path, decisions)
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (matrix, used) = EmbeddingMatrix::from_bytes(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Embedding(format!(
            "{} trailing bytes after payload",
            bytes.len() - used
        )));
    }
    Ok(matrix)
}

pub fn save_embeddings(matrix: &EmbeddingMatrix, path: &Path) -> Result<()> {
    std::fs::write(path, matrix.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Checks that every embedding index in `proposals` addresses a row of `matrix`
/// and that every unknown-stream proposal carries one.
pub fn check_alignment(proposals: &[ProposalRecord], matrix: &EmbeddingMatrix) -> Result<()> {
    for p in proposals {
        match p.embedding_index {
            Some(i) if i >= matrix.count() => {
                return Err(Error::Embedding(format!(
                    "proposal {} has embedding_index {i} but matrix has {} rows",
                    p.id,
                    matrix.count()
                )))
            }
            None if p.is_unknown() => return Err(Error::MissingEmbedding(p.id.clone())),
            _ => {}
        }
    }
    Ok(())
}
