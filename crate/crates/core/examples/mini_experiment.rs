//! End-to-end run of a config: folds, per-class PBN-DA training, the HMM
//! tail, score tables and both sweeps. Defaults to the miniature
//! synthetic sequence experiment.
//!
//! ```text
//! cargo run --release --example mini_experiment -- [config.toml] [out_dir]
//! ```

use std::path::PathBuf;
use std::time::Instant;

use pbn::harness::{run_experiment, ExperimentConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let config = args.next().map(PathBuf::from).unwrap_or_else(|| {
        PathBuf::from(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/examples/configs/mini.toml"
        ))
    });
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("pbn-mini"));
    let cfg = ExperimentConfig::load(&config)?;
    let start = Instant::now();
    let summary = run_experiment(&cfg, &out, false)?;
    print!("{}", summary.plan);
    for f in &summary.folds {
        println!(
            "fold {}: PBN-DA {} / {}, PBN-DA-HMM {:?}, external {:?}, best C {:?}, best factor {:?}",
            f.name, f.pbn_da_errors, f.test_events, f.pbn_da_hmm_errors, f.external_errors, f.best_confidence, f.best_factor
        );
    }
    println!(
        "artifacts in {} ({:.1} s)",
        out.display(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
