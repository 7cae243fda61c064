//! Deterministic synthetic proposal streams with known labels.
//!
//! Every image is a 1000x1000 canvas cut into a 10x10 grid of 100px cells.
//! Each generated item occupies one cell, and boxes never leave their cell,
//! so IoU between items in different cells is exactly zero and labeling
//! outcomes are fixed by construction:
//!
//! | item              | ground truth in cell | proposal                      | IoU       |
//! |-------------------|----------------------|-------------------------------|-----------|
//! | pos               | future 80x80         | GT jittered by <= 5px         | >= 0.78   |
//! | known_as_unknown  | known 80x80          | GT jittered by <= 5px         | >= 0.78   |
//! | amb               | known or future      | top slice of GT, height 26-38 | 0.33-0.47 |
//! | neg               | none                 | random box inside the cell    | 0         |
//! | known stream      | known 80x80          | known-stream record           | -         |
//! | unmatched future  | future 80x80         | none                          | -         |
//!
//! Embeddings are `normalize(center + spread * g / sqrt(dim))` with
//! `g ~ N(0, I)`, around one center per class (or per mode).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    save_embeddings, save_groundtruth, save_proposals, BBox, Category, EmbeddingMatrix,
    GroundTruthBox, Label, ProposalRecord, Stream,
};
use crate::error::{Error, Result};
use crate::labeling::LabelCounts;

pub const CANVAS: f64 = 1000.0;
pub const CELL: f64 = 100.0;
pub const CELLS_PER_IMAGE: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Geometry {
    /// Every class (and every mode) gets its own axis, optionally tilted
    /// toward a negative axis by `alignment`.
    Orthogonal,
    /// All classes share one direction; only noise differs.
    Identical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectnessRanges {
    pub pos: [f64; 2],
    pub neg: [f64; 2],
    pub other: [f64; 2],
}

impl Default for ObjectnessRanges {
    fn default() -> Self {
        Self {
            pos: [0.2, 0.9],
            neg: [0.05, 0.7],
            other: [0.1, 0.9],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub dim: usize,
    pub images: usize,
    pub seed: u64,
    pub image_prefix: String,
    pub id_prefix: String,
    pub counts: LabelCounts,
    /// Known-stream records (matched to known ground truth, no embedding).
    pub known_stream: usize,
    /// Future ground-truth objects no proposal covers.
    pub unmatched_future: usize,
    pub geometry: Geometry,
    pub positive_modes: usize,
    pub negative_modes: usize,
    /// Cosine between positive mode `j` and negative mode `j % negative_modes`.
    pub alignment: f64,
    pub spread: f64,
    /// Spread of negatives; defaults to `spread`.
    pub negative_spread: Option<f64>,
    pub objectness: ObjectnessRanges,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            images: 50,
            seed: 0,
            image_prefix: "img".into(),
            id_prefix: "p".into(),
            counts: LabelCounts {
                pos: 100,
                known_as_unknown: 50,
                neg: 400,
                amb: 50,
            },
            known_stream: 50,
            unmatched_future: 20,
            geometry: Geometry::Orthogonal,
            positive_modes: 1,
            negative_modes: 1,
            alignment: 0.0,
            spread: 0.5,
            negative_spread: None,
            objectness: ObjectnessRanges::default(),
        }
    }
}

impl SynthConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config("dim must be at least 2".into()));
        }
        if self.images == 0 {
            return Err(Error::Config("images must be positive".into()));
        }
        if self.positive_modes == 0 || self.negative_modes == 0 {
            return Err(Error::Config("mode counts must be positive".into()));
        }
        if !(-1.0..=1.0).contains(&self.alignment) {
            return Err(Error::Config("alignment must lie in [-1, 1]".into()));
        }
        if self.spread < 0.0 || self.negative_spread.is_some_and(|s| s < 0.0) {
            return Err(Error::Config("spreads must be nonnegative".into()));
        }
        for r in [
            self.objectness.pos,
            self.objectness.neg,
            self.objectness.other,
        ] {
            if !(0.0 <= r[0] && r[0] <= r[1] && r[1] <= 1.0) {
                return Err(Error::Config(format!(
                    "objectness range {r:?} must lie within [0, 1]"
                )));
            }
        }
        if self.geometry == Geometry::Orthogonal
            && self.dim < self.negative_modes + self.positive_modes + 2
        {
            return Err(Error::Config(format!(
                "orthogonal geometry needs dim >= {} (negative modes + positive modes + 2)",
                self.negative_modes + self.positive_modes + 2
            )));
        }
        Ok(())
    }

    fn items(&self) -> usize {
        self.counts.total() + self.known_stream + self.unmatched_future
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub proposals: Vec<ProposalRecord>,
    pub groundtruth: Vec<GroundTruthBox>,
    pub embeddings: EmbeddingMatrix,
    /// Intended label of every unknown-stream proposal, in stream order.
    pub intended: Vec<Label>,
    /// Positive mode of every unknown-stream proposal (`None` for other labels).
    pub modes: Vec<Option<usize>>,
}

impl SynthData {
    pub fn image_ids(&self) -> Vec<String> {
        let cfg_images: std::collections::BTreeSet<&str> = self
            .proposals
            .iter()
            .map(|p| p.image_id.as_str())
            .chain(self.groundtruth.iter().map(|g| g.image_id.as_str()))
            .collect();
        cfg_images.into_iter().map(String::from).collect()
    }

    /// Writes `proposals.jsonl`, `groundtruth.jsonl` and `embeddings.bin`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_proposals(&self.proposals, &dir.join("proposals.jsonl"))?;
        save_groundtruth(&self.groundtruth, &dir.join("groundtruth.jsonl"))?;
        save_embeddings(&self.embeddings, &dir.join("embeddings.bin"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Item {
    Unknown(Label),
    KnownStream,
    UnmatchedFuture,
}

struct Directions {
    pos: Vec<Vec<f64>>,
    neg: Vec<Vec<f64>>,
    known: Vec<f64>,
    amb: Vec<f64>,
}

fn axis(dim: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[i] = 1.0;
    v
}

fn directions(cfg: &SynthConfig) -> Directions {
    let dim = cfg.dim;
    match cfg.geometry {
        Geometry::Identical => Directions {
            pos: vec![axis(dim, 0); cfg.positive_modes],
            neg: vec![axis(dim, 0); cfg.negative_modes],
            known: axis(dim, 0),
            amb: axis(dim, 0),
        },
        Geometry::Orthogonal => {
            let nm = cfg.negative_modes;
            let pm = cfg.positive_modes;
            let a = cfg.alignment;
            let b = (1.0 - a * a).max(0.0).sqrt();
            let pos = (0..pm)
                .map(|j| {
                    let mut v = vec![0.0; dim];
                    v[j % nm] = a;
                    v[nm + j] = b;
                    v
                })
                .collect();
            Directions {
                pos,
                neg: (0..nm).map(|j| axis(dim, j)).collect(),
                known: axis(dim, nm + pm),
                amb: axis(dim, nm + pm + 1),
            }
        }
    }
}

fn sample_around(center: &[f64], spread: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let scale = spread / (center.len() as f64).sqrt();
    let v: Vec<f64> = center
        .iter()
        .map(|c| c + scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

fn jitter(g: &BBox, rng: &mut ChaCha8Rng) -> BBox {
    let dx = rng.random_range(-5.0..=5.0);
    let dy = rng.random_range(-5.0..=5.0);
    BBox::new(g.x1() + dx, g.y1() + dy, g.x2() + dx, g.y2() + dy).expect("jittered box is valid")
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let total = cfg.items();
    let per_image = total.div_ceil(cfg.images);
    if per_image > CELLS_PER_IMAGE {
        return Err(Error::Geometry(format!(
            "{total} items over {} images needs {per_image} cells per image, only {CELLS_PER_IMAGE} fit",
            cfg.images
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut items: Vec<Item> = Vec::with_capacity(total);
    for label in Label::ALL {
        items.extend(std::iter::repeat_n(
            Item::Unknown(label),
            cfg.counts.get(label),
        ));
    }
    items.extend(std::iter::repeat_n(Item::KnownStream, cfg.known_stream));
    items.extend(std::iter::repeat_n(
        Item::UnmatchedFuture,
        cfg.unmatched_future,
    ));
    items.shuffle(&mut rng);

    let dirs = directions(cfg);
    let neg_spread = cfg.negative_spread.unwrap_or(cfg.spread);
    let mut proposals = Vec::new();
    let mut groundtruth = Vec::new();
    let mut rows: Vec<f32> = Vec::new();
    let mut intended = Vec::new();
    let mut modes = Vec::new();
    let (mut pos_seen, mut neg_seen) = (0usize, 0usize);

    for (i, item) in items.iter().enumerate() {
        let image_id = format!("{}{:05}", cfg.image_prefix, i % cfg.images);
        let cell = i / cfg.images;
        let ox = (cell % 10) as f64 * CELL;
        let oy = (cell / 10) as f64 * CELL;
        let gt_box = BBox::new(ox + 10.0, oy + 10.0, ox + 90.0, oy + 90.0)?;
        let id = format!("{}{:07}", cfg.id_prefix, proposals.len());
        let mut gt = |category| {
            groundtruth.push(GroundTruthBox {
                image_id: image_id.clone(),
                bbox: gt_box,
                category,
            })
        };

        let (label, bbox, stream) = match *item {
            Item::UnmatchedFuture => {
                gt(Category::Future);
                continue;
            }
            Item::KnownStream => {
                gt(Category::Known);
                (None, jitter(&gt_box, &mut rng), Stream::Known)
            }
            Item::Unknown(label) => {
                let bbox = match label {
                    Label::Pos => {
                        gt(Category::Future);
                        jitter(&gt_box, &mut rng)
                    }
                    Label::KnownAsUnknown => {
                        gt(Category::Known);
                        jitter(&gt_box, &mut rng)
                    }
                    Label::Amb => {
                        gt(if rng.random_bool(0.5) {
                            Category::Known
                        } else {
                            Category::Future
                        });
                        let h = rng.random_range(26.0..=38.0);
                        BBox::new(gt_box.x1(), gt_box.y1(), gt_box.x2(), gt_box.y1() + h)?
                    }
                    Label::Neg => {
                        let x = ox + rng.random_range(5.0..=40.0);
                        let y = oy + rng.random_range(5.0..=40.0);
                        let w = rng.random_range(20.0..=50.0);
                        let h = rng.random_range(20.0..=50.0);
                        BBox::new(x, y, x + w, y + h)?
                    }
                };
                (Some(label), bbox, Stream::Unknown)
            }
        };

        let range = match label {
            Some(Label::Pos) => cfg.objectness.pos,
            Some(Label::Neg) => cfg.objectness.neg,
            _ => cfg.objectness.other,
        };
        let objectness = if range[0] == range[1] {
            range[0]
        } else {
            rng.random_range(range[0]..=range[1])
        };

        let embedding_index = match label {
            None => None,
            Some(label) => {
                let (center, mode, spread) = match label {
                    Label::Pos => {
                        let m = pos_seen % cfg.positive_modes;
                        pos_seen += 1;
                        (&dirs.pos[m], Some(m), cfg.spread)
                    }
                    Label::Neg => {
                        let m = neg_seen % cfg.negative_modes;
                        neg_seen += 1;
                        (&dirs.neg[m], None, neg_spread)
                    }
                    Label::KnownAsUnknown => (&dirs.known, None, cfg.spread),
                    Label::Amb => (&dirs.amb, None, cfg.spread),
                };
                rows.extend(sample_around(center, spread, &mut rng));
                intended.push(label);
                modes.push(mode);
                Some(intended.len() - 1)
            }
        };

        proposals.push(ProposalRecord {
            id,
            image_id,
            bbox,
            objectness,
            stream,
            embedding_index,
        });
    }

    Ok(SynthData {
        proposals,
        groundtruth,
        embeddings: EmbeddingMatrix::normalized(cfg.dim, rows)?,
        intended,
        modes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labeling::{label_stream, LabelThresholds};

    #[test]
    fn labels_round_trip() {
        let cfg = SynthConfig::default();
        let data = generate(&cfg).unwrap();
        let labeled = label_stream(
            &data.proposals,
            &data.groundtruth,
            &LabelThresholds::default(),
        );
        let got: Vec<Label> = labeled.iter().map(|l| l.label).collect();
        assert_eq!(got, data.intended);
        assert_eq!(LabelCounts::from_labels(got), cfg.counts);
        assert_eq!(data.embeddings.count(), cfg.counts.total());
        let known = data.proposals.iter().filter(|p| !p.is_unknown()).count();
        assert_eq!(known, cfg.known_stream);
    }

    #[test]
    fn deterministic() {
        let cfg = SynthConfig {
            seed: 9,
            ..Default::default()
        };
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = SynthConfig {
            seed: 10,
            ..Default::default()
        };
        assert_ne!(generate(&cfg).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn too_many_items_is_impossible_geometry() {
        let cfg = SynthConfig {
            images: 2,
            ..Default::default()
        };
        assert!(matches!(generate(&cfg), Err(Error::Geometry(_))));
    }

    #[test]
    fn embeddings_pass_ingestion() {
        let data = generate(&SynthConfig {
            spread: 3.0,
            ..Default::default()
        })
        .unwrap();
        let (back, _) = EmbeddingMatrix::from_bytes(&data.embeddings.to_bytes()).unwrap();
        assert_eq!(back, data.embeddings);
    }

    #[test]
    fn toml_config() {
        let cfg = SynthConfig::from_toml(
            "dim = 8\nimages = 4\n[counts]\npos = 3\nneg = 5\nknown_as_unknown = 0\namb = 1\n",
        )
        .unwrap();
        assert_eq!(cfg.dim, 8);
        assert_eq!(cfg.counts.neg, 5);
        assert_eq!(cfg.known_stream, SynthConfig::default().known_stream);
        assert!(SynthConfig::from_toml("dim = 1").is_err());
    }
}
