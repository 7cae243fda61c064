//! IoU, the four-way unknown-stream labeling rule, and the stream decomposition report.

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{BBox, Category, GroundTruthBox, Label, LabeledProposal, ProposalRecord};

/// Intersection over union of two valid boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = a.x2().min(b.x2()) - a.x1().max(b.x1());
    let ih = a.y2().min(b.y2()) - a.y1().max(b.y1());
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

fn max_iou<'a>(d: &BBox, boxes: impl IntoIterator<Item = &'a BBox>) -> f64 {
    boxes.into_iter().map(|g| iou(d, g)).fold(0.0, f64::max)
}

/// IoU thresholds of the labeling rule. The defaults are the published values
/// and should only be changed for diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelThresholds {
    /// Match threshold against future-task boxes (inclusive).
    pub positive: f64,
    /// Match threshold against current known boxes (inclusive).
    pub known: f64,
    /// Background threshold against all boxes (exclusive).
    pub negative: f64,
}

impl Default for LabelThresholds {
    fn default() -> Self {
        Self {
            positive: 0.5,
            known: 0.5,
            negative: 0.3,
        }
    }
}

impl LabelThresholds {
    /// Applies the priority rule to precomputed IoU maxima.
    pub fn classify(&self, max_iou_future: f64, max_iou_known: f64) -> Label {
        if max_iou_future >= self.positive {
            Label::Pos
        } else if max_iou_known >= self.known {
            Label::KnownAsUnknown
        } else if max_iou_future.max(max_iou_known) < self.negative {
            Label::Neg
        } else {
            Label::Amb
        }
    }
}

/// Labels one unknown-stream proposal against the known (`gk`) and future
/// (`gu`) ground truth of its image.
pub fn label_proposal<'a>(
    d: &ProposalRecord,
    gk: impl IntoIterator<Item = &'a GroundTruthBox>,
    gu: impl IntoIterator<Item = &'a GroundTruthBox>,
    thresholds: &LabelThresholds,
) -> LabeledProposal {
    let max_iou_known = max_iou(&d.bbox, gk.into_iter().map(|g| &g.bbox));
    let max_iou_future = max_iou(&d.bbox, gu.into_iter().map(|g| &g.bbox));
    LabeledProposal {
        proposal: d.clone(),
        label: thresholds.classify(max_iou_future, max_iou_known),
        max_iou_future,
        max_iou_known,
    }
}

/// Ground truth grouped by image.
#[derive(Debug, Default, Clone)]
pub struct GroundTruthIndex<'a> {
    by_image: HashMap<&'a str, (Vec<&'a GroundTruthBox>, Vec<&'a GroundTruthBox>)>,
}

impl<'a> GroundTruthIndex<'a> {
    pub fn new(boxes: &'a [GroundTruthBox]) -> Self {
        let mut by_image: HashMap<&str, (Vec<_>, Vec<_>)> = HashMap::new();
        for g in boxes {
            let entry = by_image.entry(g.image_id.as_str()).or_default();
            match g.category {
                Category::Known => entry.0.push(g),
                Category::Future => entry.1.push(g),
            }
        }
        Self { by_image }
    }

    pub fn known(&self, image_id: &str) -> &[&'a GroundTruthBox] {
        self.by_image.get(image_id).map_or(&[], |e| &e.0)
    }

    pub fn future(&self, image_id: &str) -> &[&'a GroundTruthBox] {
        self.by_image.get(image_id).map_or(&[], |e| &e.1)
    }
}

/// Labels every unknown-stream proposal, preserving input order. Known-stream
/// records are skipped.
pub fn label_stream(
    proposals: &[ProposalRecord],
    groundtruth: &[GroundTruthBox],
    thresholds: &LabelThresholds,
) -> Vec<LabeledProposal> {
    let index = GroundTruthIndex::new(groundtruth);
    proposals
        .par_iter()
        .filter(|p| p.is_unknown())
        .map(|p| {
            label_proposal(
                p,
                index.known(&p.image_id).iter().copied(),
                index.future(&p.image_id).iter().copied(),
                thresholds,
            )
        })
        .collect()
}

/// Every image id mentioned by either the proposals or the ground truth.
pub fn image_ids(proposals: &[ProposalRecord], groundtruth: &[GroundTruthBox]) -> BTreeSet<String> {
    proposals
        .iter()
        .map(|p| p.image_id.clone())
        .chain(groundtruth.iter().map(|g| g.image_id.clone()))
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub pos: usize,
    pub known_as_unknown: usize,
    pub neg: usize,
    pub amb: usize,
}

impl LabelCounts {
    pub fn from_labels(labels: impl IntoIterator<Item = Label>) -> Self {
        let mut c = Self::default();
        for l in labels {
            c.add(l);
        }
        c
    }

    pub fn add(&mut self, label: Label) {
        match label {
            Label::Pos => self.pos += 1,
            Label::KnownAsUnknown => self.known_as_unknown += 1,
            Label::Neg => self.neg += 1,
            Label::Amb => self.amb += 1,
        }
    }

    pub fn get(&self, label: Label) -> usize {
        match label {
            Label::Pos => self.pos,
            Label::KnownAsUnknown => self.known_as_unknown,
            Label::Neg => self.neg,
            Label::Amb => self.amb,
        }
    }

    pub fn total(&self) -> usize {
        self.pos + self.known_as_unknown + self.neg + self.amb
    }
}

/// Percentages over the total unknown stream; `None` when the stream is empty.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelPercentages {
    pub pos: Option<f64>,
    pub known_as_unknown: Option<f64>,
    pub neg: Option<f64>,
    pub amb: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamDecomposition {
    pub total: usize,
    pub images: usize,
    pub counts: LabelCounts,
    pub percentages: LabelPercentages,
}

pub fn decompose(
    proposals: &[LabeledProposal],
    image_ids: &BTreeSet<String>,
) -> StreamDecomposition {
    let counts = LabelCounts::from_labels(proposals.iter().map(|p| p.label));
    let total = counts.total();
    let pct = |n: usize| (total > 0).then(|| 100.0 * n as f64 / total as f64);
    StreamDecomposition {
        total,
        images: image_ids.len(),
        counts,
        percentages: LabelPercentages {
            pos: pct(counts.pos),
            known_as_unknown: pct(counts.known_as_unknown),
            neg: pct(counts.neg),
            amb: pct(counts.amb),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::Stream;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn gt(b: BBox, category: Category) -> GroundTruthBox {
        GroundTruthBox {
            image_id: "img".into(),
            bbox: b,
            category,
        }
    }

    fn proposal(b: BBox) -> ProposalRecord {
        ProposalRecord {
            id: "d".into(),
            image_id: "img".into(),
            bbox: b,
            objectness: 0.5,
            stream: Stream::Unknown,
            embedding_index: None,
        }
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(5.0, 5.0, 6.0, 6.0)), 0.0);
        let v = iou(&a, &bx(1.0, 1.0, 3.0, 3.0));
        assert!((v - 1.0 / 7.0).abs() < 1e-15);
        // touching edges
        assert_eq!(iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(1.0, 0.0, 2.0, 1.0)), 0.0);
    }

    #[test]
    fn future_match_takes_priority() {
        // future box: IoU 0.6; known box: IoU 0.9
        let d = bx(0.0, 0.0, 100.0, 100.0);
        let future = gt(bx(0.0, 0.0, 100.0, 60.0), Category::Future);
        let known = gt(bx(0.0, 0.0, 100.0, 90.0), Category::Known);
        let l = label_proposal(
            &proposal(d),
            [&known],
            [&future],
            &LabelThresholds::default(),
        );
        assert_eq!(l.label, Label::Pos);
        assert!((l.max_iou_future - 0.6).abs() < 1e-12);
        assert!((l.max_iou_known - 0.9).abs() < 1e-12);
    }

    #[test]
    fn empty_image_is_negative() {
        let l = label_proposal(
            &proposal(bx(0.0, 0.0, 5.0, 5.0)),
            [],
            [],
            &LabelThresholds::default(),
        );
        assert_eq!(l.label, Label::Neg);
        assert_eq!((l.max_iou_future, l.max_iou_known), (0.0, 0.0));
    }

    #[test]
    fn intermediate_overlap_is_ambiguous() {
        let d = bx(0.0, 0.0, 100.0, 100.0);
        let known = gt(bx(0.0, 0.0, 100.0, 40.0), Category::Known);
        let future = gt(bx(0.0, 0.0, 100.0, 10.0), Category::Future);
        let l = label_proposal(
            &proposal(d),
            [&known],
            [&future],
            &LabelThresholds::default(),
        );
        assert_eq!(l.label, Label::Amb);
    }

    #[test]
    fn decompose_examples() {
        let empty = decompose(&[], &BTreeSet::new());
        assert_eq!(empty.total, 0);
        assert_eq!(empty.percentages, LabelPercentages::default());

        let mk = |label| LabeledProposal {
            proposal: proposal(bx(0.0, 0.0, 1.0, 1.0)),
            label,
            max_iou_future: 0.0,
            max_iou_known: 0.0,
        };
        let four: Vec<_> = Label::ALL.iter().map(|&l| mk(l)).collect();
        let ids: BTreeSet<String> = ["img".to_string()].into();
        let d = decompose(&four, &ids);
        assert_eq!(d.total, 4);
        assert_eq!(d.images, 1);
        for p in [
            d.percentages.pos,
            d.percentages.neg,
            d.percentages.amb,
            d.percentages.known_as_unknown,
        ] {
            assert_eq!(p, Some(25.0));
        }
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0f64..100.0, 0.0f64..100.0, 0.5f64..80.0, 0.5f64..80.0)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn future_match_forces_pos(d in arb_box(), known in proptest::collection::vec(arb_box(), 0..4)) {
            let gk: Vec<_> = known.into_iter().map(|b| gt(b, Category::Known)).collect();
            let gu = gt(d, Category::Future);
            let l = label_proposal(&proposal(d), &gk, [&gu], &LabelThresholds::default());
            prop_assert_eq!(l.label, Label::Pos);
        }

        #[test]
        fn decompose_counts_sum(labels in proptest::collection::vec(0usize..4, 0..50)) {
            let lp: Vec<_> = labels.iter().map(|&i| LabeledProposal {
                proposal: proposal(bx(0.0, 0.0, 1.0, 1.0)),
                label: Label::ALL[i],
                max_iou_future: 0.0,
                max_iou_known: 0.0,
            }).collect();
            let d = decompose(&lp, &BTreeSet::new());
            prop_assert_eq!(d.counts.total(), labels.len());
            if !labels.is_empty() {
                let p = d.percentages;
                let sum = p.pos.unwrap() + p.neg.unwrap() + p.amb.unwrap() + p.known_as_unknown.unwrap();
                prop_assert!((sum - 100.0).abs() < 0.1);
            }
        }
    }
}
