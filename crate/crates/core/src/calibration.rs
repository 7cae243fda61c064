//! Neyman-Pearson threshold selection and alpha sweeps.
//!
//! Given likelihood-ratio scores on held-out calibration positives and a
//! false-suppression budget `alpha`, the threshold is the smallest `tau` with
//! `#{score > tau} / n <= alpha`: the order statistic at 1-based index
//! `n - floor(alpha * n)`. Suppression is strict (`score > tau`), so ties at
//! `tau` are kept.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{EmbeddingMatrix, GroundTruthBox, LabeledProposal};
use crate::error::{Error, Result};
use crate::filtering::score_labeled;
use crate::memory::{DualMemory, LrtParams};
use crate::metrics::MetricsReport;

pub const DEFAULT_ALPHA: f64 = 0.10;

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )))
    }
}

/// Largest `j <= n` with `j / n <= alpha`, evaluated in the same floating
/// point arithmetic a caller would use to check the budget.
pub fn allowed_exceedances(n: usize, alpha: f64) -> usize {
    let nf = n as f64;
    let mut j = ((alpha * nf).floor().max(0.0) as usize).min(n);
    while j < n && ((j + 1) as f64 / nf) <= alpha {
        j += 1;
    }
    while j > 0 && (j as f64 / nf) > alpha {
        j -= 1;
    }
    j
}

/// The `(1 - alpha)`-quantile threshold of `scores`.
pub fn np_threshold(scores: &[f64], alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(Error::InsufficientData("no calibration scores".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidParameter("NaN calibration score".into()));
    }
    let n = scores.len();
    let m = n - allowed_exceedances(n, alpha);
    let mut sorted = scores.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    Ok(sorted[m - 1])
}

/// Summary of a calibration run, as emitted by the `calibrate` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub alpha: f64,
    pub tau: f64,
    pub n: usize,
    pub exceedances: usize,
    pub exceedance_rate: f64,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub median: f64,
}

pub fn calibrate(scores: &[f64], alpha: f64) -> Result<CalibrationSummary> {
    let tau = np_threshold(scores, alpha)?;
    let n = scores.len();
    let mut sorted = scores.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let exceedances = scores.iter().filter(|&&s| s > tau).count();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    Ok(CalibrationSummary {
        alpha,
        tau,
        n,
        exceedances,
        exceedance_rate: exceedances as f64 / n as f64,
        min: sorted[0],
        max: sorted[n - 1],
        mean: scores.iter().sum::<f64>() / n as f64,
        median,
    })
}

/// Labeled evaluation proposals together with what is needed to score and
/// evaluate them.
#[derive(Debug, Clone, Copy)]
pub struct EvalSet<'a> {
    pub labeled: &'a [LabeledProposal],
    pub embeddings: &'a EmbeddingMatrix,
    pub groundtruth: &'a [GroundTruthBox],
    pub image_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub alpha: f64,
    pub tau: f64,
    /// Realized false-suppression rate on the calibration positives.
    pub calibration_exceedance: f64,
    pub metrics: MetricsReport,
}

/// One operating point per `alpha`. Scores are computed once and re-thresholded.
pub fn alpha_sweep(
    mem: &DualMemory,
    params: &LrtParams,
    eval: &EvalSet<'_>,
    alphas: &[f64],
) -> Result<Vec<OperatingPoint>> {
    let calibration = mem.threshold_scores(params)?;
    let eval_scores = score_labeled(eval.labeled, eval.embeddings, mem, params)?;
    sweep_scores(&calibration, &eval_scores, eval, alphas)
}

/// Sweep over precomputed scores; `eval_scores` must align with `eval.labeled`.
pub fn sweep_scores(
    calibration: &[f64],
    eval_scores: &[f64],
    eval: &EvalSet<'_>,
    alphas: &[f64],
) -> Result<Vec<OperatingPoint>> {
    if eval_scores.len() != eval.labeled.len() {
        return Err(Error::InvalidParameter(
            "eval scores must align with labeled proposals".into(),
        ));
    }
    for a in alphas {
        check_alpha(*a)?;
    }
    if alphas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter(
            "alphas must be strictly increasing".into(),
        ));
    }
    alphas
        .par_iter()
        .map(|&alpha| {
            let tau = np_threshold(calibration, alpha)?;
            let retained: Vec<bool> = eval_scores.iter().map(|&s| s <= tau).collect();
            let exceed = calibration.iter().filter(|&&s| s > tau).count();
            Ok(OperatingPoint {
                alpha,
                tau,
                calibration_exceedance: exceed as f64 / calibration.len() as f64,
                metrics: MetricsReport::compute(
                    eval.labeled,
                    &retained,
                    eval.groundtruth,
                    eval.image_count,
                )?,
            })
        })
        .collect()
}
