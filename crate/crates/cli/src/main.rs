use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dualmem::baselines::{
    objectness_filter, prototype_filter, PrototypeConfig, PrototypeMemory, DEFAULT_KMEANS_ITERS,
    DEFAULT_NEGATIVE_CENTROIDS, DEFAULT_OBJECTNESS_THRESHOLD, DEFAULT_POSITIVE_CENTROIDS,
    DEFAULT_TAU_COS,
};
use dualmem::calibration::{calibrate, sweep_scores, EvalSet, DEFAULT_ALPHA};
use dualmem::datamodel::{
    check_alignment, load_decisions, load_embeddings, load_groundtruth, load_labeled,
    load_proposals, save_decisions, save_embeddings, save_labeled, EmbeddingMatrix, ProposalRecord,
};
use dualmem::filtering::{
    attach_labels, filter_stream, retention_mask, score_labeled, FilterDecision,
};
use dualmem::labeling::{decompose, image_ids, label_stream, LabelThresholds};
use dualmem::memory::{
    build_memory, fuse_embeddings, DualMemory, FusionMode, LrtParams, DEFAULT_K,
    DEFAULT_SPLIT_FRACTION, DEFAULT_TEMPERATURE,
};
use dualmem::metrics::MetricsReport;
use dualmem::pipeline::{run_pipeline, RunConfig};
use dualmem::probe::{run_probe, ProbeConfig, DEFAULT_FOLDS};
use dualmem::synth::{generate, SynthConfig};

#[derive(Parser)]
#[command(
    name = "dualmem",
    version,
    about = "Dual-memory likelihood-ratio filter for unknown-object proposals"
)]
struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, env = "DUALMEM_THREADS", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Lrt {
    /// Neighbours per memory.
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    temperature: f64,
}

impl Lrt {
    fn params(&self) -> Result<LrtParams> {
        Ok(LrtParams::new(self.k, self.temperature)?)
    }
}

#[derive(Args)]
struct Stream {
    #[arg(long)]
    proposals: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Validate interchange files and print a summary.
    IngestCheck {
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long)]
        groundtruth: Option<PathBuf>,
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Label the unknown stream against ground truth and report its composition.
    Decompose {
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long)]
        groundtruth: PathBuf,
        /// Also write the labeled proposals here.
        #[arg(long)]
        labeled_out: Option<PathBuf>,
    },
    /// Split labeled calibration proposals into positive/negative memories.
    BuildMemory {
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SPLIT_FRACTION)]
        split_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pick the threshold for a false-suppression budget.
    Calibrate {
        #[arg(long)]
        memory: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
        #[command(flatten)]
        lrt: Lrt,
    },
    /// Score a proposal stream and write decisions.
    Filter {
        #[arg(long)]
        memory: PathBuf,
        #[command(flatten)]
        stream: Stream,
        #[arg(long, conflicts_with = "alpha", required_unless_present = "alpha")]
        tau: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        /// Labeled proposals whose labels are copied onto the decisions.
        #[arg(long)]
        labeled: Option<PathBuf>,
        #[command(flatten)]
        lrt: Lrt,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute metrics for a decision file, or for the unfiltered stream.
    Evaluate {
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long)]
        groundtruth: PathBuf,
        #[arg(long, required_unless_present = "raw")]
        decisions: Option<PathBuf>,
        #[arg(long, conflicts_with = "decisions")]
        raw: bool,
    },
    /// Metrics at several alpha values, one row per value.
    Sweep {
        #[arg(long)]
        memory: PathBuf,
        #[command(flatten)]
        stream: Stream,
        #[arg(long)]
        groundtruth: PathBuf,
        /// Comma-separated, strictly increasing.
        #[arg(long, value_delimiter = ',', required = true)]
        alphas: Vec<f64>,
        #[command(flatten)]
        lrt: Lrt,
        #[arg(long)]
        json: bool,
    },
    /// Grouped cross-validated linear probe on embeddings.
    Probe {
        #[arg(long)]
        features: PathBuf,
        /// Labeled proposals (from `decompose --labeled-out`).
        #[arg(long)]
        labels_from: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_FOLDS)]
        folds: usize,
    },
    /// Baseline filters.
    #[command(subcommand)]
    Baseline(Baseline),
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the full pipeline from a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Combine two critics' embeddings row by row.
    Fuse {
        #[arg(long)]
        first: PathBuf,
        #[arg(long)]
        second: PathBuf,
        #[arg(long, default_value = "concat")]
        mode: FusionMode,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum Baseline {
    /// Keep proposals whose objectness is at least the threshold.
    Objectness {
        #[arg(long)]
        proposals: PathBuf,
        #[arg(long, default_value_t = DEFAULT_OBJECTNESS_THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Centroid prototypes built from the memory by spherical k-means.
    Kmeans {
        #[arg(long)]
        memory: PathBuf,
        #[command(flatten)]
        stream: Stream,
        #[arg(long, default_value_t = DEFAULT_POSITIVE_CENTROIDS)]
        k_pos: usize,
        #[arg(long, default_value_t = DEFAULT_NEGATIVE_CENTROIDS)]
        k_neg: usize,
        #[arg(long, default_value_t = DEFAULT_TAU_COS)]
        tau: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_KMEANS_ITERS)]
        max_iters: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_stream(s: &Stream) -> Result<(Vec<ProposalRecord>, EmbeddingMatrix)> {
    let proposals = load_proposals(&s.proposals)?;
    let embeddings = load_embeddings(&s.embeddings)?;
    check_alignment(&proposals, &embeddings)?;
    Ok((proposals, embeddings))
}

fn load_memory(path: &Path) -> Result<DualMemory> {
    DualMemory::load(path).with_context(|| format!("loading memory {}", path.display()))
}

fn write_decisions(decisions: &[FilterDecision], out: &Path) -> Result<()> {
    save_decisions(decisions, out)?;
    let suppressed = decisions.iter().filter(|d| d.suppressed).count();
    log::info!("{suppressed} of {} proposals suppressed", decisions.len());
    print_json(&serde_json::json!({
        "decisions": decisions.len(),
        "suppressed": suppressed,
        "out": out,
    }))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::IngestCheck {
            proposals,
            groundtruth,
            embeddings,
        } => {
            let props = load_proposals(&proposals)?;
            let unknown = props.iter().filter(|p| p.is_unknown()).count();
            let gt = groundtruth.as_deref().map(load_groundtruth).transpose()?;
            let emb = embeddings.as_deref().map(load_embeddings).transpose()?;
            if let Some(e) = &emb {
                check_alignment(&props, e)?;
            }
            print_json(&serde_json::json!({
                "proposals": props.len(),
                "unknown": unknown,
                "known": props.len() - unknown,
                "groundtruth": gt.as_ref().map(Vec::len),
                "embeddings": emb.as_ref().map(|e| e.count()),
                "dim": emb.as_ref().map(|e| e.dim()),
            }))
        }
        Command::Decompose {
            proposals,
            groundtruth,
            labeled_out,
        } => {
            let props = load_proposals(&proposals)?;
            let gt = load_groundtruth(&groundtruth)?;
            let labeled = label_stream(&props, &gt, &LabelThresholds::default());
            if let Some(out) = labeled_out {
                save_labeled(&labeled, &out)?;
            }
            print_json(&decompose(&labeled, &image_ids(&props, &gt)))
        }
        Command::BuildMemory {
            labeled,
            embeddings,
            split_fraction,
            seed,
            out,
        } => {
            let labeled = load_labeled(&labeled)?;
            let emb = load_embeddings(&embeddings)?;
            let mem = build_memory(&labeled, &emb, split_fraction, seed)?;
            mem.save(&out)?;
            print_json(&serde_json::json!({
                "positive": mem.positive().count(),
                "negative": mem.negative().count(),
                "threshold": mem.threshold_positives().count(),
                "dim": mem.dim(),
                "out": out,
            }))
        }
        Command::Calibrate { memory, alpha, lrt } => {
            let mem = load_memory(&memory)?;
            let scores = mem.threshold_scores(&lrt.params()?)?;
            print_json(&calibrate(&scores, alpha)?)
        }
        Command::Filter {
            memory,
            stream,
            tau,
            alpha,
            labeled,
            lrt,
            out,
        } => {
            let params = lrt.params()?;
            let mem = load_memory(&memory)?;
            let tau = match (tau, alpha) {
                (Some(t), _) => t,
                (None, Some(a)) => calibrate(&mem.threshold_scores(&params)?, a)?.tau,
                (None, None) => bail!("one of --tau or --alpha is required"),
            };
            let (props, emb) = load_stream(&stream)?;
            let mut decisions = filter_stream(&props, &emb, &mem, &params, tau)?;
            if let Some(path) = labeled {
                attach_labels(&mut decisions, &load_labeled(&path)?);
            }
            write_decisions(&decisions, &out)
        }
        Command::Evaluate {
            proposals,
            groundtruth,
            decisions,
            raw,
        } => {
            let props = load_proposals(&proposals)?;
            let gt = load_groundtruth(&groundtruth)?;
            let labeled = label_stream(&props, &gt, &LabelThresholds::default());
            let images = image_ids(&props, &gt).len();
            let report = match decisions {
                Some(path) if !raw => {
                    let decisions = load_decisions(&path)?;
                    let known: BTreeSet<&str> = props.iter().map(|p| p.id.as_str()).collect();
                    if let Some(d) = decisions.iter().find(|d| !known.contains(d.id.as_str())) {
                        bail!("decision for unknown proposal id {}", d.id);
                    }
                    MetricsReport::compute(
                        &labeled,
                        &retention_mask(&labeled, &decisions),
                        &gt,
                        images,
                    )?
                }
                _ => MetricsReport::raw(&labeled, &gt, images)?,
            };
            print_json(&report)
        }
        Command::Sweep {
            memory,
            stream,
            groundtruth,
            alphas,
            lrt,
            json,
        } => {
            let params = lrt.params()?;
            let mem = load_memory(&memory)?;
            let (props, emb) = load_stream(&stream)?;
            let gt = load_groundtruth(&groundtruth)?;
            let labeled = label_stream(&props, &gt, &LabelThresholds::default());
            let eval = EvalSet {
                labeled: &labeled,
                embeddings: &emb,
                groundtruth: &gt,
                image_count: image_ids(&props, &gt).len(),
            };
            let calibration = mem.threshold_scores(&params)?;
            let scores = score_labeled(&labeled, &emb, &mem, &params)?;
            let points = sweep_scores(&calibration, &scores, &eval, &alphas)?;
            if json {
                return print_json(&points);
            }
            println!("alpha\ttau\tcal_exceedance\tfupi\tsg\tnmh\tu_recall\tudp");
            for p in &points {
                let m = &p.metrics;
                println!(
                    "{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{}\t{}",
                    p.alpha,
                    p.tau,
                    p.calibration_exceedance,
                    m.fupi,
                    fmt_opt(m.sg),
                    fmt_opt(m.nmh),
                    fmt_opt(m.u_recall),
                    fmt_opt(m.udp)
                );
            }
            Ok(())
        }
        Command::Probe {
            features,
            labels_from,
            seed,
            folds,
        } => {
            let emb = load_embeddings(&features)?;
            let labeled = load_labeled(&labels_from)?;
            let cfg = ProbeConfig {
                n_folds: folds,
                seed,
                ..Default::default()
            };
            let r = run_probe(&labeled, &emb, &cfg)?;
            for f in &r.skipped_folds {
                log::warn!("fold {f} skipped: a single class in train or test split");
            }
            print_json(&serde_json::json!({
                "n_pos": r.n_pos,
                "n_neg": r.n_neg,
                "auroc_mean": r.mean,
                "auroc_std": r.std,
                "fold_auroc": r.fold_auroc,
                "skipped_folds": r.skipped_folds,
                "ovl": r.ovl,
                "objectness_auroc": r.objectness_auroc,
            }))
        }
        Command::Baseline(Baseline::Objectness {
            proposals,
            threshold,
            out,
        }) => write_decisions(
            &objectness_filter(&load_proposals(&proposals)?, threshold),
            &out,
        ),
        Command::Baseline(Baseline::Kmeans {
            memory,
            stream,
            k_pos,
            k_neg,
            tau,
            seed,
            max_iters,
            out,
        }) => {
            let mem = load_memory(&memory)?;
            let cfg = PrototypeConfig {
                positive_centroids: k_pos,
                negative_centroids: k_neg,
                tau_cos: tau,
                seed,
                max_iters,
            };
            let proto = PrototypeMemory::build(&mem, &cfg)?;
            let (props, emb) = load_stream(&stream)?;
            write_decisions(&prototype_filter(&props, &emb, &proto)?, &out)
        }
        Command::Synth { config, out_dir } => {
            let cfg = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    SynthConfig::from_toml(&text)?
                }
                None => SynthConfig::default(),
            };
            let data = generate(&cfg)?;
            data.write(&out_dir)?;
            print_json(&serde_json::json!({
                "proposals": data.proposals.len(),
                "groundtruth": data.groundtruth.len(),
                "embeddings": data.embeddings.count(),
                "dim": data.embeddings.dim(),
                "out_dir": out_dir,
            }))
        }
        Command::Run { config } => {
            let cfg = RunConfig::load(&config)?;
            let report = run_pipeline(&cfg)?;
            print!("{}", report.table());
            Ok(())
        }
        Command::Fuse {
            first,
            second,
            mode,
            out,
        } => {
            let fused =
                fuse_embeddings(&load_embeddings(&first)?, &load_embeddings(&second)?, mode)?;
            save_embeddings(&fused, &out)?;
            print_json(
                &serde_json::json!({ "count": fused.count(), "dim": fused.dim(), "out": out }),
            )
        }
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .context("configuring thread pool")?;
    execute(cli.command)
}
