//! End-to-end run: label, build memory, calibrate, filter, evaluate.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::{calibrate, CalibrationSummary, DEFAULT_ALPHA};
use crate::datamodel::{
    check_alignment, load_embeddings, load_groundtruth, load_proposals, save_decisions,
    save_labeled, EmbeddingMatrix, GroundTruthBox, LabeledProposal, ProposalRecord,
};
use crate::error::{Error, Result};
use crate::filtering::{attach_labels, filter_stream, retention_mask};
use crate::labeling::{decompose, image_ids, label_stream, LabelThresholds, StreamDecomposition};
use crate::memory::{build_memory, fuse_embeddings, FusionMode, LrtParams, DEFAULT_SPLIT_FRACTION};
use crate::metrics::MetricsReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSet {
    pub proposals: PathBuf,
    pub groundtruth: PathBuf,
    pub embeddings: PathBuf,
    /// Second critic's embeddings, fused with `embeddings` when `fusion` is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub secondary_embeddings: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub calibration: InputSet,
    pub evaluation: InputSet,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub lrt: LrtParams,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_split")]
    pub split_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub labels: LabelThresholds,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusionMode>,
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

fn default_split() -> f64 {
    DEFAULT_SPLIT_FRACTION
}

impl RunConfig {
    /// Parses a TOML config. Relative paths are resolved against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for set in [&mut cfg.calibration, &mut cfg.evaluation] {
            for p in [
                &mut set.proposals,
                &mut set.groundtruth,
                &mut set.embeddings,
            ] {
                *p = base.join(&*p);
            }
            if let Some(p) = &mut set.secondary_embeddings {
                *p = base.join(&*p);
            }
        }
        cfg.output_dir = base.join(&cfg.output_dir);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// The config with every default spelled out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.lrt.validate()?;
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config(format!(
                "split_fraction must lie in (0, 1), got {}",
                self.split_fraction
            )));
        }
        for set in [&self.calibration, &self.evaluation] {
            let mut paths = vec![&set.proposals, &set.groundtruth, &set.embeddings];
            match (&set.secondary_embeddings, self.fusion) {
                (Some(p), Some(_)) => paths.push(p),
                (None, Some(_)) => {
                    return Err(Error::Config("fusion needs secondary_embeddings".into()))
                }
                _ => {}
            }
            if let Some(missing) = paths.into_iter().find(|p| !p.exists()) {
                return Err(Error::Config(format!(
                    "input {} does not exist",
                    missing.display()
                )));
            }
        }
        Ok(())
    }
}

/// Loaded and validated inputs for one side of the split.
#[derive(Debug, Clone)]
pub struct LoadedSet {
    pub proposals: Vec<ProposalRecord>,
    pub groundtruth: Vec<GroundTruthBox>,
    pub embeddings: EmbeddingMatrix,
}

impl LoadedSet {
    pub fn load(set: &InputSet, fusion: Option<FusionMode>) -> Result<Self> {
        let proposals = load_proposals(&set.proposals)?;
        let groundtruth = load_groundtruth(&set.groundtruth)?;
        let mut embeddings = load_embeddings(&set.embeddings)?;
        if let (Some(mode), Some(path)) = (fusion, &set.secondary_embeddings) {
            embeddings = fuse_embeddings(&embeddings, &load_embeddings(path)?, mode)?;
        }
        check_alignment(&proposals, &embeddings)?;
        Ok(Self {
            proposals,
            groundtruth,
            embeddings,
        })
    }

    pub fn image_ids(&self) -> BTreeSet<String> {
        image_ids(&self.proposals, &self.groundtruth)
    }
}

/// Fails with the first (smallest) image id present in both sets.
pub fn check_disjoint(a: &BTreeSet<String>, b: &BTreeSet<String>) -> Result<()> {
    match a.intersection(b).next() {
        Some(id) => Err(Error::ImageOverlap(id.clone())),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorySizes {
    pub positive: usize,
    pub negative: usize,
    pub threshold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub alpha: f64,
    pub tau: f64,
    pub lrt: LrtParams,
    pub seed: u64,
    pub memory: MemorySizes,
    pub calibration: CalibrationSummary,
    pub calibration_stream: StreamDecomposition,
    pub evaluation_stream: StreamDecomposition,
    pub raw: MetricsReport,
    pub filtered: MetricsReport,
}

impl PipelineReport {
    /// Raw and filtered metrics side by side.
    pub fn table(&self) -> String {
        let f = |v: Option<f64>, scale: f64, prec: usize| match v {
            Some(v) => format!("{:.*}", prec, v * scale),
            None => "--".to_string(),
        };
        let d_recall = match (self.raw.u_recall, self.filtered.u_recall) {
            (Some(a), Some(b)) => format!("{:+.1}", 100.0 * (b - a)),
            _ => "--".to_string(),
        };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<12}{:>8}{:>8}{:>8}{:>10}{:>10}",
            "Method", "FUPI", "UDP", "NMH", "U-Recall", "dU-Rec."
        );
        let _ = writeln!(
            out,
            "{:<12}{:>8.2}{:>8}{:>8}{:>10}{:>10}",
            "Raw",
            self.raw.fupi,
            f(self.raw.udp, 1.0, 3),
            "--",
            f(self.raw.u_recall, 1.0, 3),
            "--"
        );
        let _ = writeln!(
            out,
            "{:<12}{:>8.2}{:>8}{:>8}{:>10}{:>10}",
            "+ DualMem",
            self.filtered.fupi,
            f(self.filtered.udp, 1.0, 3),
            f(self.filtered.nmh, 100.0, 1) + "%",
            f(self.filtered.u_recall, 1.0, 3),
            d_recall
        );
        let _ = writeln!(
            out,
            "alpha={} tau={:.6} SG={}",
            self.alpha,
            self.tau,
            f(self.filtered.sg, 1.0, 3)
        );
        out
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Labeled calibration/evaluation streams.
pub struct Labeled {
    pub calibration: Vec<LabeledProposal>,
    pub evaluation: Vec<LabeledProposal>,
}

/// Runs every stage and writes its artifacts under `cfg.output_dir`:
/// `config.toml`, `calibration_labeled.jsonl`, `evaluation_labeled.jsonl`,
/// `memory.dmm`, `decisions.jsonl`, `report.json` and `report.txt`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineReport> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e).in_stage("config"))?;
    write_file(&out.join("config.toml"), cfg.to_toml()).map_err(|e| e.in_stage("config"))?;

    let cal = LoadedSet::load(&cfg.calibration, cfg.fusion).map_err(|e| e.in_stage("ingest"))?;
    let eval = LoadedSet::load(&cfg.evaluation, cfg.fusion).map_err(|e| e.in_stage("ingest"))?;
    let (cal_images, eval_images) = (cal.image_ids(), eval.image_ids());
    check_disjoint(&cal_images, &eval_images).map_err(|e| e.in_stage("split"))?;

    let labeled = Labeled {
        calibration: label_stream(&cal.proposals, &cal.groundtruth, &cfg.labels),
        evaluation: label_stream(&eval.proposals, &eval.groundtruth, &cfg.labels),
    };
    save_labeled(&labeled.calibration, &out.join("calibration_labeled.jsonl"))
        .map_err(|e| e.in_stage("decompose"))?;
    save_labeled(&labeled.evaluation, &out.join("evaluation_labeled.jsonl"))
        .map_err(|e| e.in_stage("decompose"))?;

    let mem = build_memory(
        &labeled.calibration,
        &cal.embeddings,
        cfg.split_fraction,
        cfg.seed,
    )
    .map_err(|e| e.in_stage("build-memory"))?;
    mem.save(&out.join("memory.dmm"))
        .map_err(|e| e.in_stage("build-memory"))?;

    let calibration = mem
        .threshold_scores(&cfg.lrt)
        .and_then(|s| calibrate(&s, cfg.alpha))
        .map_err(|e| e.in_stage("calibrate"))?;

    let mut decisions = filter_stream(
        &eval.proposals,
        &eval.embeddings,
        &mem,
        &cfg.lrt,
        calibration.tau,
    )
    .map_err(|e| e.in_stage("filter"))?;
    attach_labels(&mut decisions, &labeled.evaluation);
    save_decisions(&decisions, &out.join("decisions.jsonl")).map_err(|e| e.in_stage("filter"))?;

    let images = eval_images.len();
    let mask = retention_mask(&labeled.evaluation, &decisions);
    let raw = MetricsReport::raw(&labeled.evaluation, &eval.groundtruth, images)
        .map_err(|e| e.in_stage("evaluate"))?;
    let filtered = MetricsReport::compute(&labeled.evaluation, &mask, &eval.groundtruth, images)
        .map_err(|e| e.in_stage("evaluate"))?;

    let report = PipelineReport {
        alpha: cfg.alpha,
        tau: calibration.tau,
        lrt: cfg.lrt,
        seed: cfg.seed,
        memory: MemorySizes {
            positive: mem.positive().count(),
            negative: mem.negative().count(),
            threshold: mem.threshold_positives().count(),
        },
        calibration,
        calibration_stream: decompose(&labeled.calibration, &cal_images),
        evaluation_stream: decompose(&labeled.evaluation, &eval_images),
        raw,
        filtered,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&out.join("report.json"), json + "\n").map_err(|e| e.in_stage("report"))?;
    write_file(&out.join("report.txt"), report.table()).map_err(|e| e.in_stage("report"))?;
    Ok(report)
}
