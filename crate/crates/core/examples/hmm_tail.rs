//! Baum-Welch on sequences that move through three regimes in a fixed
//! order. The trained model prefers held-out sequences over the same
//! frames played backwards or shuffled.
//!
//! ```text
//! cargo run --release --example hmm_tail
//! ```

use nalgebra::DMatrix;
use pbn::hmm::{forward_log_likelihood, train_hmm, FeatureSequence, HmmConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const REGIMES: [[f64; 2]; 3] = [[0.0, 0.0], [3.0, 0.0], [3.0, 3.0]];

fn draw(rng: &mut ChaCha8Rng) -> FeatureSequence {
    let cuts = [rng.gen_range(8..16), rng.gen_range(24..32)];
    let v = DMatrix::from_fn(40, 2, |t, d| {
        let r = cuts.iter().filter(|&&c| t >= c).count();
        REGIMES[r][d] + 0.5 * rng.sample::<f64, _>(StandardNormal)
    });
    FeatureSequence::new(v).expect("finite values")
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = HmmConfig {
        states: 3,
        components: 1,
        floor: 0.01,
        ..Default::default()
    };
    let train: Vec<_> = (0..30).map(|_| draw(&mut rng)).collect();
    let (model, report) = train_hmm(&train, &cfg, &mut rng)?;
    for (i, ll) in report.log_likelihood.iter().enumerate().step_by(4) {
        println!("iteration {i:2}: total log-likelihood {ll:.2}");
    }

    let held = draw(&mut rng);
    let n = held.len();
    let backwards: Vec<usize> = (0..n).rev().collect();
    let mut shuffled: Vec<usize> = (0..n).collect();
    shuffled.shuffle(&mut rng);
    for (name, rows) in [
        ("in order", (0..n).collect()),
        ("backwards", backwards),
        ("shuffled", shuffled),
    ] {
        let seq = FeatureSequence::new(held.values().select_rows(&rows))?;
        println!(
            "held-out {name:9}: {:9.2}",
            forward_log_likelihood(&model, &seq)?
        );
    }
    Ok(())
}
