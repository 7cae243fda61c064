#![allow(dead_code)]

use std::path::Path;

use dualmem::datamodel::EmbeddingMatrix;
use dualmem::labeling::LabelCounts;
use dualmem::pipeline::{InputSet, RunConfig};
use dualmem::synth::{generate, SynthConfig};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.iter().map(|x| (x / n) as f32).collect();
        }
    }
}

pub fn random_matrix(rng: &mut impl Rng, dim: usize, count: usize) -> EmbeddingMatrix {
    let data: Vec<f32> = (0..count).flat_map(|_| unit_vector(rng, dim)).collect();
    EmbeddingMatrix::normalized(dim, data).unwrap()
}

pub fn counts(pos: usize, neg: usize, known_as_unknown: usize, amb: usize) -> LabelCounts {
    LabelCounts {
        pos,
        known_as_unknown,
        neg,
        amb,
    }
}

/// Writes a calibration and an evaluation split (image-disjoint via prefixes)
/// and returns a run config pointing at them.
pub fn synth_split(dir: &Path, cal: SynthConfig, eval: SynthConfig) -> RunConfig {
    let set = |name: &str, mut cfg: SynthConfig| {
        cfg.image_prefix = format!("{name}-img");
        cfg.id_prefix = format!("{name}-");
        let sub = dir.join(name);
        generate(&cfg).unwrap().write(&sub).unwrap();
        InputSet {
            proposals: sub.join("proposals.jsonl"),
            groundtruth: sub.join("groundtruth.jsonl"),
            embeddings: sub.join("embeddings.bin"),
            secondary_embeddings: None,
        }
    };
    RunConfig {
        calibration: set("cal", cal),
        evaluation: set("eval", eval),
        output_dir: dir.join("out"),
        lrt: Default::default(),
        alpha: 0.10,
        split_fraction: 0.5,
        seed: 0,
        labels: Default::default(),
        fusion: None,
    }
}
