//! Post-hoc filtering of the unknown-object stream of open-world detectors
//! with dual k-NN memories and a calibrated likelihood-ratio test.

pub mod baselines;
pub mod calibration;
pub mod datamodel;
pub mod error;
pub mod filtering;
pub mod labeling;
pub mod memory;
pub mod metrics;
pub mod pipeline;
pub mod probe;
pub mod synth;

pub use error::{Error, Result};
