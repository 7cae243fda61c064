//! Files written by an external extractor, byte by byte, must pass ingestion.

use std::fmt::Write as _;
use std::path::Path;

use dualmem::datamodel::{
    check_alignment, load_embeddings, load_groundtruth, load_proposals, Category, Stream,
};
use dualmem::Error;

fn dmem(dim: u32, rows: &[Vec<f32>]) -> Vec<u8> {
    let mut b = b"DMEM".to_vec();
    b.extend(1u32.to_le_bytes());
    b.extend(dim.to_le_bytes());
    b.extend((rows.len() as u64).to_le_bytes());
    for r in rows {
        for v in r {
            b.extend(v.to_le_bytes());
        }
    }
    b
}

/// Ten images, three proposals each, dim 4; rows carry small float drift.
fn write_fixture(dir: &Path) -> usize {
    let mut props = String::new();
    let mut gt = String::new();
    let mut rows = Vec::new();
    for img in 0..10 {
        for j in 0..3 {
            let idx = rows.len();
            let x = 10.0 * j as f64;
            writeln!(
                props,
                r#"{{"id":"im{img}_{j}","image_id":"im{img}","bbox":[{x},5.5,{},60.25],"objectness":0.{j}5,"stream":"unknown","embedding_index":{idx}}}"#,
                x + 40.0
            )
            .unwrap();
            let drift = 1.0 + 4e-4 * (j as f32 - 1.0);
            let mut r = vec![0.0f32; 4];
            r[(img + j) % 4] = 0.6 * drift;
            r[(img + j + 1) % 4] = 0.8 * drift;
            rows.push(r);
        }
        writeln!(
            props,
            r#"{{"id":"im{img}_k","image_id":"im{img}","bbox":[0,0,20,20],"objectness":1,"stream":"known"}}"#
        )
        .unwrap();
        writeln!(
            gt,
            r#"{{"image_id":"im{img}","bbox":[0,0,50,50],"category":"{}"}}"#,
            if img % 2 == 0 { "known" } else { "future" }
        )
        .unwrap();
    }
    std::fs::write(dir.join("proposals.jsonl"), props).unwrap();
    std::fs::write(dir.join("groundtruth.jsonl"), gt).unwrap();
    std::fs::write(dir.join("embeddings.bin"), dmem(4, &rows)).unwrap();
    rows.len()
}

#[test]
fn ten_image_fixture_passes_ingestion() {
    let dir = tempfile::tempdir().unwrap();
    let n = write_fixture(dir.path());
    let props = load_proposals(&dir.path().join("proposals.jsonl")).unwrap();
    let gt = load_groundtruth(&dir.path().join("groundtruth.jsonl")).unwrap();
    let emb = load_embeddings(&dir.path().join("embeddings.bin")).unwrap();
    assert_eq!(props.len(), 40);
    assert_eq!(
        props.iter().filter(|p| p.stream == Stream::Known).count(),
        10
    );
    assert_eq!(
        gt.iter().filter(|g| g.category == Category::Future).count(),
        5
    );
    assert_eq!((emb.count(), emb.dim()), (n, 4));
    check_alignment(&props, &emb).unwrap();
    for r in emb.rows() {
        let norm = r.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-3);
    }
    // order preserved
    assert_eq!(props[0].id, "im0_0");
    assert_eq!(props[3].id, "im0_k");
    assert_eq!(props[1].embedding_index, Some(1));
}

#[test]
fn index_past_matrix_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    std::fs::write(
        dir.path().join("short.bin"),
        dmem(4, &[vec![1.0, 0.0, 0.0, 0.0]]),
    )
    .unwrap();
    let props = load_proposals(&dir.path().join("proposals.jsonl")).unwrap();
    let emb = load_embeddings(&dir.path().join("short.bin")).unwrap();
    assert!(check_alignment(&props, &emb).is_err());
}

#[test]
fn header_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("e.bin");
    let mut bad_magic = dmem(4, &[vec![1.0, 0.0, 0.0, 0.0]]);
    bad_magic[0] = b'X';
    std::fs::write(&p, bad_magic).unwrap();
    assert!(load_embeddings(&p)
        .unwrap_err()
        .to_string()
        .contains("bad magic"));

    let mut bad_version = dmem(4, &[vec![1.0, 0.0, 0.0, 0.0]]);
    bad_version[4] = 2;
    std::fs::write(&p, bad_version).unwrap();
    assert!(load_embeddings(&p)
        .unwrap_err()
        .to_string()
        .contains("version"));

    let mut truncated = dmem(4, &[vec![1.0, 0.0, 0.0, 0.0]]);
    truncated[12] = 2;
    std::fs::write(&p, truncated).unwrap();
    assert!(load_embeddings(&p)
        .unwrap_err()
        .to_string()
        .contains("truncated payload"));

    std::fs::write(&p, dmem(4, &[vec![2.0, 0.0, 0.0, 0.0]])).unwrap();
    let err = load_embeddings(&p).unwrap_err();
    assert!(matches!(err, Error::EmbeddingNorm { row: 0, .. }));
    assert!(err
        .to_string()
        .contains("embedding norm 2.0 outside tolerance"));
}

#[test]
fn malformed_records_report_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.jsonl");
    std::fs::write(
        &p,
        concat!(
            r#"{"id":"a","image_id":"i","bbox":[0,0,10,10],"objectness":0.5,"stream":"unknown"}"#,
            "\n",
            r#"{"id":"b","image_id":"i","bbox":[0,0,10,10],"objectness":1.2,"stream":"unknown"}"#,
            "\n"
        ),
    )
    .unwrap();
    let msg = load_proposals(&p).unwrap_err().to_string();
    assert!(
        msg.contains(":2:") && msg.contains("objectness out of range"),
        "{msg}"
    );
}
