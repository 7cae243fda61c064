//! Linear-probe separability diagnostic: logistic regression on embeddings,
//! evaluated under image-grouped k-fold cross-validation.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{EmbeddingMatrix, Label, LabeledProposal};
use crate::error::{Error, Result};
use crate::filtering::embedding_row;
use crate::metrics::{auroc, overlap_coefficient};

pub const DEFAULT_FOLDS: usize = 5;

/// Image-level fold assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub n_folds: usize,
    pub by_image: BTreeMap<String, usize>,
    /// Fold of each input item, aligned with the ids passed to [`group_kfold`].
    pub per_item: Vec<usize>,
}

impl FoldAssignment {
    pub fn fold_of(&self, image_id: &str) -> Option<usize> {
        self.by_image.get(image_id).copied()
    }
}

/// Shuffles the distinct image ids (sorted first, so input order does not
/// matter) with a seeded ChaCha8 stream and deals them round-robin into folds.
pub fn group_kfold<S: AsRef<str>>(
    image_ids: &[S],
    n_folds: usize,
    seed: u64,
) -> Result<FoldAssignment> {
    if n_folds < 2 {
        return Err(Error::InvalidParameter("need at least 2 folds".into()));
    }
    let unique: BTreeSet<&str> = image_ids.iter().map(|s| s.as_ref()).collect();
    if unique.len() < n_folds {
        return Err(Error::InsufficientData(format!(
            "{} distinct images for {n_folds} folds",
            unique.len()
        )));
    }
    let mut order: Vec<&str> = unique.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let by_image: BTreeMap<String, usize> = order
        .iter()
        .enumerate()
        .map(|(i, id)| (id.to_string(), i % n_folds))
        .collect();
    let per_item = image_ids.iter().map(|id| by_image[id.as_ref()]).collect();
    Ok(FoldAssignment {
        n_folds,
        by_image,
        per_item,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticConfig {
    pub l2: f64,
    pub iters: usize,
    pub step: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            iters: 1000,
            step: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogisticModel {
    pub fn logit(&self, x: &[f32]) -> f64 {
        self.bias
            + self
                .weights
                .iter()
                .zip(x)
                .map(|(w, &v)| w * v as f64)
                .sum::<f64>()
    }

    pub fn probability(&self, x: &[f32]) -> f64 {
        sigmoid(self.logit(x))
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Full-batch gradient descent on mean log-loss plus `l2/2 * |w|^2`, from a
/// zero initialization. The bias is not regularized.
pub fn fit_logistic(
    rows: &[&[f32]],
    labels: &[bool],
    cfg: &LogisticConfig,
) -> Result<LogisticModel> {
    if rows.len() != labels.len() || rows.is_empty() {
        return Err(Error::InvalidParameter(
            "rows and labels must be nonempty and aligned".into(),
        ));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 || n_pos == labels.len() {
        return Err(Error::InsufficientData(
            "training set has a single class".into(),
        ));
    }
    let dim = rows[0].len();
    let n = rows.len() as f64;
    let mut w = vec![0.0f64; dim];
    let mut b = 0.0f64;
    let mut grad = vec![0.0f64; dim];
    for _ in 0..cfg.iters {
        grad.iter_mut().zip(&w).for_each(|(g, wi)| *g = cfg.l2 * wi);
        let mut grad_b = 0.0;
        for (x, &y) in rows.iter().zip(labels) {
            let z = b + w.iter().zip(*x).map(|(wi, &v)| wi * v as f64).sum::<f64>();
            let r = (sigmoid(z) - if y { 1.0 } else { 0.0 }) / n;
            grad_b += r;
            grad.iter_mut()
                .zip(*x)
                .for_each(|(g, &v)| *g += r * v as f64);
        }
        w.iter_mut()
            .zip(&grad)
            .for_each(|(wi, g)| *wi -= cfg.step * g);
        b -= cfg.step * grad_b;
    }
    Ok(LogisticModel {
        weights: w,
        bias: b,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub n_folds: usize,
    pub seed: u64,
    pub logistic: LogisticConfig,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            n_folds: DEFAULT_FOLDS,
            seed: 0,
            logistic: LogisticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub n_pos: usize,
    pub n_neg: usize,
    /// Per-fold test AUROC; `None` for folds that were skipped.
    pub fold_auroc: Vec<Option<f64>>,
    pub skipped_folds: Vec<usize>,
    pub mean: f64,
    /// Population standard deviation over completed folds.
    pub std: f64,
    /// Out-of-fold logits aligned with the probe inputs; `None` where the
    /// training fold could not be fit.
    pub oof_logits: Vec<Option<f64>>,
    pub labels: Vec<bool>,
    pub ovl: Option<f64>,
    pub objectness_auroc: Option<f64>,
    pub folds: FoldAssignment,
}

/// Cross-validated probe over explicit feature rows.
pub fn probe_features<S: AsRef<str> + Sync>(
    rows: &[&[f32]],
    labels: &[bool],
    image_ids: &[S],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if rows.len() != labels.len() || rows.len() != image_ids.len() {
        return Err(Error::InvalidParameter(
            "rows, labels and image ids must align".into(),
        ));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InsufficientData("probe needs both classes".into()));
    }
    let folds = group_kfold(image_ids, cfg.n_folds, cfg.seed)?;

    struct FoldOutcome {
        test: Vec<usize>,
        logits: Option<Vec<f64>>,
        auroc: Option<f64>,
    }
    let outcomes: Vec<FoldOutcome> = (0..cfg.n_folds)
        .into_par_iter()
        .map(|f| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..rows.len()).partition(|&i| folds.per_item[i] == f);
            let train_x: Vec<&[f32]> = train.iter().map(|&i| rows[i]).collect();
            let train_y: Vec<bool> = train.iter().map(|&i| labels[i]).collect();
            let model = match fit_logistic(&train_x, &train_y, &cfg.logistic) {
                Ok(m) => m,
                Err(_) => {
                    warn!("probe fold {f}: training split has a single class, skipping");
                    return FoldOutcome {
                        test,
                        logits: None,
                        auroc: None,
                    };
                }
            };
            let logits: Vec<f64> = test.iter().map(|&i| model.logit(rows[i])).collect();
            let test_y: Vec<bool> = test.iter().map(|&i| labels[i]).collect();
            let auroc = auroc(&logits, &test_y).ok();
            if auroc.is_none() {
                warn!("probe fold {f}: test split has a single class, AUROC skipped");
            }
            FoldOutcome {
                test,
                logits: Some(logits),
                auroc,
            }
        })
        .collect();

    let mut oof_logits = vec![None; rows.len()];
    let mut fold_auroc = Vec::with_capacity(cfg.n_folds);
    let mut skipped_folds = Vec::new();
    for (f, o) in outcomes.into_iter().enumerate() {
        if let Some(logits) = o.logits {
            for (&i, z) in o.test.iter().zip(logits) {
                oof_logits[i] = Some(z);
            }
        }
        if o.auroc.is_none() {
            skipped_folds.push(f);
        }
        fold_auroc.push(o.auroc);
    }
    let done: Vec<f64> = fold_auroc.iter().flatten().copied().collect();
    if done.is_empty() {
        return Err(Error::InsufficientData(
            "every probe fold was skipped".into(),
        ));
    }
    let mean = done.iter().sum::<f64>() / done.len() as f64;
    let std = (done.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / done.len() as f64).sqrt();

    let (mut pos_z, mut neg_z) = (Vec::new(), Vec::new());
    for (z, &y) in oof_logits.iter().zip(labels) {
        if let Some(z) = z {
            if y {
                pos_z.push(*z);
            } else {
                neg_z.push(*z);
            }
        }
    }
    let ovl = overlap_coefficient(&pos_z, &neg_z).ok();

    Ok(ProbeResult {
        n_pos,
        n_neg,
        fold_auroc,
        skipped_folds,
        mean,
        std,
        oof_logits,
        labels: labels.to_vec(),
        ovl,
        objectness_auroc: None,
        folds,
    })
}

/// Probes positive-vs-negative unknowns; other labels are excluded. Also
/// reports the AUROC of raw objectness, which needs no fitting.
pub fn run_probe(
    labeled: &[LabeledProposal],
    embeddings: &EmbeddingMatrix,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let selected: Vec<&LabeledProposal> = labeled
        .iter()
        .filter(|l| matches!(l.label, Label::Pos | Label::Neg))
        .collect();
    let rows = selected
        .iter()
        .map(|l| embedding_row(&l.proposal, embeddings))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<bool> = selected.iter().map(|l| l.label == Label::Pos).collect();
    let images: Vec<&str> = selected
        .iter()
        .map(|l| l.proposal.image_id.as_str())
        .collect();
    let mut result = probe_features(&rows, &labels, &images, cfg)?;
    let objectness: Vec<f64> = selected.iter().map(|l| l.proposal.objectness).collect();
    result.objectness_auroc = auroc(&objectness, &labels).ok();
    Ok(result)
}
