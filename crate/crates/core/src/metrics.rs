//! Unknown-stream evaluation metrics.
//!
//! All ratio metrics are `None` when their denominator is zero, so that
//! "undefined" is never confused with a perfect or a zero score.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::datamodel::{Category, GroundTruthBox, Label, LabeledProposal, ProposalRecord};
use crate::error::{Error, Result};
use crate::labeling::{iou, LabelCounts};

/// IoU at which a retained prediction recovers a future-task object.
pub const RECALL_IOU: f64 = 0.5;
/// Histogram resolution of [`overlap_coefficient`].
pub const OVL_BINS: usize = 100;

/// Retained background-type false unknowns per image.
pub fn fupi(retained: impl IntoIterator<Item = Label>, image_count: usize) -> f64 {
    assert!(image_count > 0, "FUPI needs at least one image");
    let neg = retained.into_iter().filter(|&l| l == Label::Neg).count();
    neg as f64 / image_count as f64
}

/// `1 - retained_neg / raw_neg`.
pub fn suppression_gain(
    raw: impl IntoIterator<Item = Label>,
    retained: impl IntoIterator<Item = Label>,
) -> Option<f64> {
    let raw_neg = raw.into_iter().filter(|&l| l == Label::Neg).count();
    let kept = retained.into_iter().filter(|&l| l == Label::Neg).count();
    (raw_neg > 0).then(|| 1.0 - kept as f64 / raw_neg as f64)
}

/// Fraction of raw positive unknowns that were suppressed. `retained` must be
/// a subset of `raw`.
pub fn nmh(
    raw: impl IntoIterator<Item = Label>,
    retained: impl IntoIterator<Item = Label>,
) -> Option<f64> {
    let raw_pos = raw.into_iter().filter(|&l| l == Label::Pos).count();
    let kept = retained.into_iter().filter(|&l| l == Label::Pos).count();
    (raw_pos > 0).then(|| raw_pos.saturating_sub(kept) as f64 / raw_pos as f64)
}

/// Unknown detection precision over the retained stream: positives over
/// positives plus negatives. Known-as-unknown and ambiguous are excluded.
pub fn udp(retained: impl IntoIterator<Item = Label>) -> Option<f64> {
    let c = LabelCounts::from_labels(retained);
    let denom = c.pos + c.neg;
    (denom > 0).then(|| c.pos as f64 / denom as f64)
}

/// Fraction of future-category ground truth boxes matched at IoU >= 0.5 by at
/// least one retained unknown prediction in the same image. Non-future boxes
/// in `groundtruth` are ignored; `None` when there are no future boxes.
pub fn u_recall<'a>(
    retained: impl IntoIterator<Item = &'a ProposalRecord>,
    groundtruth: &[GroundTruthBox],
) -> Option<f64> {
    let mut by_image: HashMap<&str, Vec<&ProposalRecord>> = HashMap::new();
    for p in retained.into_iter().filter(|p| p.is_unknown()) {
        by_image.entry(p.image_id.as_str()).or_default().push(p);
    }
    let future: Vec<&GroundTruthBox> = groundtruth
        .iter()
        .filter(|g| g.category == Category::Future)
        .collect();
    if future.is_empty() {
        return None;
    }
    let hit = future
        .iter()
        .filter(|g| {
            by_image
                .get(g.image_id.as_str())
                .is_some_and(|ps| ps.iter().any(|p| iou(&p.bbox, &g.bbox) >= RECALL_IOU))
        })
        .count();
    Some(hit as f64 / future.len() as f64)
}

/// Area under the ROC curve via the rank-sum statistic with mid-ranks for ties.
/// Equals the probability that a random positive outscores a random negative,
/// ties counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidParameter(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidParameter("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InsufficientData(
            "AUROC needs at least one positive and one negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the positive rank sum keeps mid-ranks integral.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j share the mid-rank (i + 1 + j) / 2.
        let twice_mid = (i + 1 + j) as u64;
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k]).count() as u64;
        twice_rank_sum += pos_in_group * twice_mid;
        i = j;
    }
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// Overlap of two score distributions: the sum of bin-wise minima of their
/// normalized histograms on a shared grid of [`OVL_BINS`] equal-width bins
/// spanning the pooled range. Returns 1.0 when every value is identical.
pub fn overlap_coefficient(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientData(
            "overlap coefficient of an empty sample".into(),
        ));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("non-finite score".into()));
    }
    let (lo, hi) = a
        .iter()
        .chain(b)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if hi == lo {
        return Ok(1.0);
    }
    let width = (hi - lo) / OVL_BINS as f64;
    let hist = |xs: &[f64]| {
        let mut h = [0.0f64; OVL_BINS];
        for &x in xs {
            let bin = (((x - lo) / width).floor() as usize).min(OVL_BINS - 1);
            h[bin] += 1.0;
        }
        let n = xs.len() as f64;
        h.iter_mut().for_each(|c| *c /= n);
        h
    };
    let (ha, hb) = (hist(a), hist(b));
    Ok(ha
        .iter()
        .zip(&hb)
        .map(|(p, q)| p.min(*q))
        .sum::<f64>()
        .min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fupi: f64,
    pub sg: Option<f64>,
    pub nmh: Option<f64>,
    pub u_recall: Option<f64>,
    pub udp: Option<f64>,
    pub raw_counts: LabelCounts,
    pub retained_counts: LabelCounts,
    pub images: usize,
}

impl MetricsReport {
    /// Evaluates a filter outcome. `retained[i]` tells whether `raw[i]`
    /// survived; passing all-`true` evaluates the unfiltered stream.
    pub fn compute(
        raw: &[LabeledProposal],
        retained: &[bool],
        groundtruth: &[GroundTruthBox],
        image_count: usize,
    ) -> Result<Self> {
        if raw.len() != retained.len() {
            return Err(Error::InvalidParameter(format!(
                "{} proposals but {} retention flags",
                raw.len(),
                retained.len()
            )));
        }
        if image_count == 0 {
            return Err(Error::InsufficientData(
                "evaluation set has no images".into(),
            ));
        }
        let kept = || raw.iter().zip(retained).filter(|(_, &r)| r).map(|(p, _)| p);
        let raw_labels = || raw.iter().map(|p| p.label);
        let kept_labels = || kept().map(|p| p.label);
        Ok(Self {
            fupi: fupi(kept_labels(), image_count),
            sg: suppression_gain(raw_labels(), kept_labels()),
            nmh: nmh(raw_labels(), kept_labels()),
            u_recall: u_recall(kept().map(|p| &p.proposal), groundtruth),
            udp: udp(kept_labels()),
            raw_counts: LabelCounts::from_labels(raw_labels()),
            retained_counts: LabelCounts::from_labels(kept_labels()),
            images: image_count,
        })
    }

    pub fn raw(
        raw: &[LabeledProposal],
        groundtruth: &[GroundTruthBox],
        image_count: usize,
    ) -> Result<Self> {
        Self::compute(raw, &vec![true; raw.len()], groundtruth, image_count)
    }
}
