use std::path::Path;
use std::process::{Command, Output};

fn dualmem(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualmem"))
        .current_dir(dir)
        .env("DUALMEM_THREADS", "2")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = dualmem(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(s: &str) -> serde_json::Value {
    serde_json::from_str(s).unwrap()
}

fn synth(dir: &Path, name: &str, seed: u64) {
    std::fs::write(
        dir.join(format!("{name}.toml")),
        format!("images = 40\nseed = {seed}\nimage_prefix = \"{name}\"\nid_prefix = \"{name}-\"\nspread = 1.0\nalignment = 0.5\n"),
    )
    .unwrap();
    ok(
        dir,
        &[
            "synth",
            "--config",
            &format!("{name}.toml"),
            "--out-dir",
            name,
        ],
    );
}

const RUN: &str = r#"
output_dir = "out"
seed = 3
[calibration]
proposals = "cal/proposals.jsonl"
groundtruth = "cal/groundtruth.jsonl"
embeddings = "cal/embeddings.bin"
[evaluation]
proposals = "eval/proposals.jsonl"
groundtruth = "eval/groundtruth.jsonl"
embeddings = "eval/embeddings.bin"
"#;

#[test]
fn staged_commands_match_full_run() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, "cal", 1);
    synth(d, "eval", 2);

    let check = json(&ok(
        d,
        &[
            "ingest-check",
            "--proposals",
            "eval/proposals.jsonl",
            "--embeddings",
            "eval/embeddings.bin",
        ],
    ));
    assert_eq!(check["unknown"], 600);
    assert_eq!(check["dim"], 32);

    let dec = json(&ok(
        d,
        &[
            "decompose",
            "--proposals",
            "cal/proposals.jsonl",
            "--groundtruth",
            "cal/groundtruth.jsonl",
            "--labeled-out",
            "cal.labeled.jsonl",
        ],
    ));
    assert_eq!(dec["counts"]["pos"], 100);
    assert_eq!(dec["total"], 600);

    ok(
        d,
        &[
            "build-memory",
            "--labeled",
            "cal.labeled.jsonl",
            "--embeddings",
            "cal/embeddings.bin",
            "--seed",
            "3",
            "--out",
            "mem.dmm",
        ],
    );
    let cal = json(&ok(
        d,
        &["calibrate", "--memory", "mem.dmm", "--alpha", "0.1"],
    ));
    let tau = cal["tau"].as_f64().unwrap();

    let stream = [
        "--proposals",
        "eval/proposals.jsonl",
        "--embeddings",
        "eval/embeddings.bin",
    ];
    let mut by_alpha = vec![
        "filter", "--memory", "mem.dmm", "--alpha", "0.1", "--out", "a.jsonl",
    ];
    by_alpha.extend(stream);
    ok(d, &by_alpha);
    let tau_s = format!("{tau:?}");
    let mut by_tau = vec![
        "filter", "--memory", "mem.dmm", "--tau", &tau_s, "--out", "t.jsonl",
    ];
    by_tau.extend(stream);
    ok(d, &by_tau);
    assert_eq!(
        std::fs::read(d.join("a.jsonl")).unwrap(),
        std::fs::read(d.join("t.jsonl")).unwrap()
    );

    let eval = [
        "--proposals",
        "eval/proposals.jsonl",
        "--groundtruth",
        "eval/groundtruth.jsonl",
    ];
    let mut e = vec!["evaluate", "--decisions", "a.jsonl"];
    e.extend(eval);
    let filtered = json(&ok(d, &e));
    let mut e = vec!["evaluate", "--raw"];
    e.extend(eval);
    let raw = json(&ok(d, &e));
    assert!(filtered["fupi"].as_f64().unwrap() < raw["fupi"].as_f64().unwrap());
    assert!(raw["nmh"].is_number());

    std::fs::write(d.join("run.toml"), RUN).unwrap();
    let table = ok(d, &["run", "--config", "run.toml"]);
    assert!(table.contains("+ DualMem"));
    let report = json(&std::fs::read_to_string(d.join("out/report.json")).unwrap());
    assert_eq!(report["filtered"], filtered);
    assert_eq!(report["raw"], raw);
    assert_eq!(report["tau"].as_f64().unwrap(), tau);
}

#[test]
fn sweep_probe_and_baselines() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, "cal", 5);
    synth(d, "eval", 6);
    ok(
        d,
        &[
            "decompose",
            "--proposals",
            "cal/proposals.jsonl",
            "--groundtruth",
            "cal/groundtruth.jsonl",
            "--labeled-out",
            "cal.labeled.jsonl",
        ],
    );
    ok(
        d,
        &[
            "build-memory",
            "--labeled",
            "cal.labeled.jsonl",
            "--embeddings",
            "cal/embeddings.bin",
            "--out",
            "mem.dmm",
        ],
    );
    let stream = [
        "--proposals",
        "eval/proposals.jsonl",
        "--embeddings",
        "eval/embeddings.bin",
    ];

    let mut s = vec![
        "sweep",
        "--memory",
        "mem.dmm",
        "--groundtruth",
        "eval/groundtruth.jsonl",
        "--alphas",
        "0.05,0.1,0.2",
    ];
    s.extend(stream);
    let table = ok(d, &s);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("alpha\ttau"));
    s.push("--json");
    assert_eq!(json(&ok(d, &s)).as_array().unwrap().len(), 3);

    let probe = json(&ok(
        d,
        &[
            "probe",
            "--features",
            "cal/embeddings.bin",
            "--labels-from",
            "cal.labeled.jsonl",
            "--seed",
            "1",
        ],
    ));
    assert!(probe["auroc_mean"].as_f64().unwrap() > 0.9);

    let o = json(&ok(
        d,
        &[
            "baseline",
            "objectness",
            "--proposals",
            "eval/proposals.jsonl",
            "--threshold",
            "0.6",
            "--out",
            "o.jsonl",
        ],
    ));
    assert_eq!(o["decisions"], 650);
    let mut k = vec![
        "baseline", "kmeans", "--memory", "mem.dmm", "--k-pos", "4", "--k-neg", "8", "--tau",
        "0.8", "--seed", "2", "--out", "k.jsonl",
    ];
    k.extend(stream);
    ok(d, &k);
    let first = std::fs::read_to_string(d.join("k.jsonl")).unwrap();
    assert!(first.contains("max_cos_negative"));
    ok(d, &k);
    assert_eq!(std::fs::read_to_string(d.join("k.jsonl")).unwrap(), first);
}

#[test]
fn overlap_and_bad_flags_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, "cal", 1);
    std::fs::write(d.join("run.toml"), RUN.replace("eval/", "cal/")).unwrap();
    let out = dualmem(d, &["run", "--config", "run.toml"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("cal00000"), "{err}");

    let out = dualmem(
        d,
        &[
            "filter",
            "--memory",
            "m",
            "--proposals",
            "p",
            "--embeddings",
            "e",
            "--out",
            "o",
        ],
    );
    assert!(!out.status.success());
    let out = dualmem(
        d,
        &[
            "evaluate",
            "--proposals",
            "p",
            "--groundtruth",
            "g",
            "--raw",
            "--decisions",
            "x",
        ],
    );
    assert!(!out.status.success());
}

#[test]
fn fuse_concatenates() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    synth(d, "cal", 1);
    let out = json(&ok(
        d,
        &[
            "fuse",
            "--first",
            "cal/embeddings.bin",
            "--second",
            "cal/embeddings.bin",
            "--mode",
            "concat",
            "--out",
            "f.bin",
        ],
    ));
    assert_eq!(out["dim"], 64);
    assert_eq!(out["count"], 600);
}
