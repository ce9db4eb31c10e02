//! Experiment orchestration: holdout folds, score tables, the
//! self-combination and ensemble sweeps, the 2-D alignment demo and
//! config-driven end-to-end runs.

pub mod demo;
pub mod experiment;
pub mod folds;
pub mod scores;
pub mod sweeps;
pub mod synthetic;

use sha2::{Digest, Sha256};

pub use demo::{demo2d, Demo2dConfig, Demo2dReport};
pub use experiment::{run_experiment, ExperimentConfig, RunSummary};
pub use folds::{make_folds, FoldSpec};
pub use scores::{Evaluation, ScoreTable};
pub use sweeps::{ensemble_sweep, self_combination_sweep, LikelihoodCache, SweepPoint};

/// Child seed for one stage of a run. Stable across platforms and
/// independent of thread scheduling.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    for p in parts {
        h.update(p.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

pub(crate) fn csv_format(e: csv::Error) -> crate::error::PbnError {
    crate::error::PbnError::format(e.position().map_or(0, |p| p.byte()), e.to_string())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
