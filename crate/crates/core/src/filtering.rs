//! Applies the calibrated suppression rule to an unknown stream. Known-stream
//! records pass through untouched.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{EmbeddingMatrix, Label, LabeledProposal, ProposalRecord, Stream};
use crate::error::{Error, Result};
use crate::memory::{lrt_score, DualMemory, LrtParams};

/// Sub-conditions of the prototype baseline rule, recorded for inspection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrototypeEvidence {
    pub max_cos_negative: f64,
    pub max_cos_positive: f64,
    pub tau_cos: f64,
}

/// Outcome for one proposal. For likelihood-ratio decisions
/// `suppressed == (lambda > tau)`; known-stream records carry no score and are
/// never suppressed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub id: String,
    pub stream: Stream,
    pub lambda: Option<f64>,
    pub tau: Option<f64>,
    pub suppressed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prototype: Option<PrototypeEvidence>,
}

impl FilterDecision {
    pub fn scored(id: impl Into<String>, lambda: f64, tau: f64, label: Option<Label>) -> Self {
        Self {
            id: id.into(),
            stream: Stream::Unknown,
            lambda: Some(lambda),
            tau: Some(tau),
            suppressed: lambda > tau,
            label,
            prototype: None,
        }
    }

    pub fn bypass(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            stream: Stream::Known,
            lambda: None,
            tau: None,
            suppressed: false,
            label: None,
            prototype: None,
        }
    }

    pub fn retained(&self) -> bool {
        !self.suppressed
    }
}

pub(crate) fn embedding_row<'a>(
    p: &ProposalRecord,
    embeddings: &'a EmbeddingMatrix,
) -> Result<&'a [f32]> {
    let idx = p
        .embedding_index
        .ok_or_else(|| Error::MissingEmbedding(p.id.clone()))?;
    embeddings.get(idx).ok_or_else(|| {
        Error::Embedding(format!(
            "proposal {} has embedding_index {idx} but matrix has {} rows",
            p.id,
            embeddings.count()
        ))
    })
}

/// Likelihood-ratio score of every unknown-stream proposal; `None` for the
/// known stream. Output is aligned with the input.
pub fn score_stream(
    proposals: &[ProposalRecord],
    embeddings: &EmbeddingMatrix,
    mem: &DualMemory,
    params: &LrtParams,
) -> Result<Vec<Option<f64>>> {
    params.validate()?;
    if embeddings.dim() != mem.dim() {
        return Err(Error::InvalidParameter(format!(
            "embedding dim {} does not match memory dim {}",
            embeddings.dim(),
            mem.dim()
        )));
    }
    proposals
        .par_iter()
        .map(|p| match p.stream {
            Stream::Known => Ok(None),
            Stream::Unknown => lrt_score(embedding_row(p, embeddings)?, mem, params).map(Some),
        })
        .collect()
}

/// Scores labeled (unknown-stream) proposals.
pub fn score_labeled(
    labeled: &[LabeledProposal],
    embeddings: &EmbeddingMatrix,
    mem: &DualMemory,
    params: &LrtParams,
) -> Result<Vec<f64>> {
    params.validate()?;
    labeled
        .par_iter()
        .map(|p| lrt_score(embedding_row(&p.proposal, embeddings)?, mem, params))
        .collect()
}

/// Thresholds precomputed scores. `scores` must be aligned with `proposals`.
pub fn decide(
    proposals: &[ProposalRecord],
    scores: &[Option<f64>],
    tau: f64,
) -> Vec<FilterDecision> {
    assert_eq!(
        proposals.len(),
        scores.len(),
        "scores must align with proposals"
    );
    proposals
        .iter()
        .zip(scores)
        .map(|(p, s)| match (p.stream, s) {
            (Stream::Unknown, Some(lambda)) => {
                FilterDecision::scored(p.id.clone(), *lambda, tau, None)
            }
            _ => FilterDecision::bypass(p.id.clone()),
        })
        .collect()
}

/// Scores and thresholds a mixed stream in one pass.
pub fn filter_stream(
    proposals: &[ProposalRecord],
    embeddings: &EmbeddingMatrix,
    mem: &DualMemory,
    params: &LrtParams,
    tau: f64,
) -> Result<Vec<FilterDecision>> {
    let scores = score_stream(proposals, embeddings, mem, params)?;
    Ok(decide(proposals, &scores, tau))
}

/// Copies labels from `labeled` onto the matching decisions (by proposal id).
pub fn attach_labels(decisions: &mut [FilterDecision], labeled: &[LabeledProposal]) {
    let by_id: HashMap<&str, Label> = labeled
        .iter()
        .map(|l| (l.proposal.id.as_str(), l.label))
        .collect();
    for d in decisions {
        if let Some(&l) = by_id.get(d.id.as_str()) {
            d.label = Some(l);
        }
    }
}

/// The retained set: unknown proposals that were not suppressed plus the whole
/// known stream, in input order.
pub fn retained<'a>(
    proposals: &'a [ProposalRecord],
    decisions: &[FilterDecision],
) -> Vec<&'a ProposalRecord> {
    assert_eq!(
        proposals.len(),
        decisions.len(),
        "decisions must align with proposals"
    );
    proposals
        .iter()
        .zip(decisions)
        .filter(|(_, d)| d.retained())
        .map(|(p, _)| p)
        .collect()
}

/// Per-proposal retention mask for `labeled`, looked up by id in `decisions`.
/// Proposals without a decision count as retained.
pub fn retention_mask(labeled: &[LabeledProposal], decisions: &[FilterDecision]) -> Vec<bool> {
    let by_id: HashMap<&str, bool> = decisions
        .iter()
        .map(|d| (d.id.as_str(), d.retained()))
        .collect();
    labeled
        .iter()
        .map(|l| by_id.get(l.proposal.id.as_str()).copied().unwrap_or(true))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::BBox;
    use crate::memory::Provenance;

    fn record(id: &str, stream: Stream, emb: Option<usize>) -> ProposalRecord {
        ProposalRecord {
            id: id.into(),
            image_id: "img".into(),
            bbox: BBox::new(0.0, 0.0, 4.0, 4.0).unwrap(),
            objectness: 0.3,
            stream,
            embedding_index: emb,
        }
    }

    fn setup() -> (Vec<ProposalRecord>, EmbeddingMatrix, DualMemory) {
        let emb = EmbeddingMatrix::from_rows(2, vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8]).unwrap();
        let pos = EmbeddingMatrix::from_rows(2, vec![1.0, 0.0]).unwrap();
        let neg = EmbeddingMatrix::from_rows(2, vec![0.0, 1.0]).unwrap();
        let mem = DualMemory::from_parts(
            pos.clone(),
            neg,
            pos,
            Provenance {
                split_id: "t".into(),
                split_fraction: 0.5,
                seed: 0,
                positive_ids: vec![],
                negative_ids: vec![],
                threshold_ids: vec![],
            },
        )
        .unwrap();
        let props = vec![
            record("u0", Stream::Unknown, Some(0)),
            record("k0", Stream::Known, None),
            record("u1", Stream::Unknown, Some(1)),
            record("u2", Stream::Unknown, Some(2)),
        ];
        (props, emb, mem)
    }

    #[test]
    fn permissive_threshold_retains_everything() {
        let (props, emb, mem) = setup();
        let d = filter_stream(&props, &emb, &mem, &LrtParams::default(), 1e9).unwrap();
        assert!(d.iter().all(|d| !d.suppressed));
        assert_eq!(retained(&props, &d).len(), props.len());
        assert_eq!(d[1], FilterDecision::bypass("k0"));
    }

    #[test]
    fn strict_threshold_suppresses_all_unknowns() {
        let (props, emb, mem) = setup();
        let d = filter_stream(&props, &emb, &mem, &LrtParams::default(), -1e9).unwrap();
        let kept = retained(&props, &d);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0], &props[1]);
    }

    #[test]
    fn missing_embedding_is_an_error() {
        let (mut props, emb, mem) = setup();
        props.push(record("u3", Stream::Unknown, None));
        assert!(matches!(
            filter_stream(&props, &emb, &mem, &LrtParams::default(), 0.0),
            Err(Error::MissingEmbedding(id)) if id == "u3"
        ));
    }

    #[test]
    fn lowering_tau_never_unsuppresses() {
        let (props, emb, mem) = setup();
        let scores = score_stream(&props, &emb, &mem, &LrtParams::default()).unwrap();
        let mut prev: Option<Vec<FilterDecision>> = None;
        for tau in [30.0, 10.0, 0.0, -5.0, -30.0] {
            let d = decide(&props, &scores, tau);
            if let Some(p) = &prev {
                for (a, b) in p.iter().zip(&d) {
                    assert!(!a.suppressed || b.suppressed);
                }
            }
            prev = Some(d);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let (props, emb, mem) = setup();
        let d = filter_stream(&props, &emb, &mem, &LrtParams::default(), 0.0).unwrap();
        let perm = [3, 1, 0, 2];
        let permuted: Vec<_> = perm.iter().map(|&i| props[i].clone()).collect();
        let dp = filter_stream(&permuted, &emb, &mem, &LrtParams::default(), 0.0).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            assert_eq!(dp[j], d[i]);
        }
    }
}
