mod common;

use common::{counts, synth_split};
use dualmem::datamodel::{load_decisions, load_embeddings, load_proposals};
use dualmem::filtering::filter_stream;
use dualmem::memory::DualMemory;
use dualmem::pipeline::{run_pipeline, RunConfig};
use dualmem::synth::SynthConfig;
use dualmem::Error;

fn small(seed: u64) -> SynthConfig {
    SynthConfig {
        images: 40,
        seed,
        counts: counts(400, 1200, 80, 80),
        known_stream: 60,
        unmatched_future: 30,
        spread: 1.0,
        alignment: 0.5,
        ..Default::default()
    }
}

#[test]
fn synthetic_run_reduces_fupi_within_budget() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth_split(dir.path(), small(1), small(2));
    let r = run_pipeline(&cfg).unwrap();
    let n_pos = r.raw.raw_counts.pos as f64;
    let sigma = (cfg.alpha * (1.0 - cfg.alpha) / n_pos).sqrt();
    assert!(r.filtered.fupi < r.raw.fupi);
    assert!(r.filtered.nmh.unwrap() <= cfg.alpha + 3.0 * sigma);
    assert_eq!(r.memory.positive + r.memory.threshold, 400);
    assert_eq!(r.memory.negative, 1200);
    for f in [
        "config.toml",
        "calibration_labeled.jsonl",
        "evaluation_labeled.jsonl",
        "memory.dmm",
        "decisions.jsonl",
        "report.json",
        "report.txt",
    ] {
        assert!(cfg.output_dir.join(f).exists(), "{f}");
    }
    let table = std::fs::read_to_string(cfg.output_dir.join("report.txt")).unwrap();
    assert!(table.starts_with("Method"));
    assert!(table.contains("+ DualMem"));
}

#[test]
fn rerun_is_bit_identical_and_config_echo_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth_split(dir.path(), small(3), small(4));
    run_pipeline(&cfg).unwrap();
    let first = std::fs::read(cfg.output_dir.join("report.json")).unwrap();
    let decisions = std::fs::read(cfg.output_dir.join("decisions.jsonl")).unwrap();

    let echoed = RunConfig::load(&cfg.output_dir.join("config.toml")).unwrap();
    assert_eq!(echoed, cfg);
    run_pipeline(&echoed).unwrap();
    assert_eq!(
        std::fs::read(cfg.output_dir.join("report.json")).unwrap(),
        first
    );
    assert_eq!(
        std::fs::read(cfg.output_dir.join("decisions.jsonl")).unwrap(),
        decisions
    );
}

#[test]
fn filter_stage_reruns_from_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = synth_split(dir.path(), small(5), small(6));
    let r = run_pipeline(&cfg).unwrap();
    let mem = DualMemory::load(&cfg.output_dir.join("memory.dmm")).unwrap();
    let props = load_proposals(&cfg.evaluation.proposals).unwrap();
    let emb = load_embeddings(&cfg.evaluation.embeddings).unwrap();
    let again = filter_stream(&props, &emb, &mem, &cfg.lrt, r.tau).unwrap();
    let saved = load_decisions(&cfg.output_dir.join("decisions.jsonl")).unwrap();
    assert_eq!(again.len(), saved.len());
    for (a, b) in again.iter().zip(&saved) {
        assert_eq!(
            (&a.id, a.lambda, a.tau, a.suppressed),
            (&b.id, b.lambda, b.tau, b.suppressed)
        );
    }
}

#[test]
fn shared_image_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = synth_split(dir.path(), small(7), small(8));
    cfg.evaluation = cfg.calibration.clone();
    let err = run_pipeline(&cfg).unwrap_err();
    match &err {
        Error::Stage { stage, source } => {
            assert_eq!(*stage, "split");
            assert!(matches!(**source, Error::ImageOverlap(ref id) if id == "cal-img00000"));
        }
        other => panic!("{other:?}"),
    }
    assert!(err.to_string().contains("cal-img00000"));
}

#[test]
fn stage_errors_carry_stage_name() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = synth_split(dir.path(), small(9), small(10));
    std::fs::write(&cfg.evaluation.embeddings, b"JUNK").unwrap();
    let err = run_pipeline(&cfg).unwrap_err();
    assert!(err.to_string().starts_with("stage ingest:"), "{err}");

    cfg.evaluation.proposals = dir.path().join("missing.jsonl");
    let err = run_pipeline(&cfg).unwrap_err();
    assert!(err.to_string().starts_with("stage config:"), "{err}");
}
