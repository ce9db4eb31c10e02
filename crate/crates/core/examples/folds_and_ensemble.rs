//! Holdout folds for a labelled set, then an ensemble sweep over two score
//! tables that make different mistakes.
//!
//! ```text
//! cargo run --example folds_and_ensemble
//! ```

use pbn::harness::make_folds;
use pbn::harness::sweeps::{ensemble_sweep, factor_grid, strict_interior_minimum};
use pbn::harness::synthetic::complementary_tables;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let labels: Vec<usize> = (0..120).map(|i| i % 3).collect();
    for f in make_folds(&labels, 4, 17, 0.25)? {
        let test: Vec<usize> = f.test.iter().map(|t| t.len()).collect();
        println!(
            "fold {} (seed {:016x}): test per class {test:?}",
            f.name, f.seed
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (a, b) = complementary_tables(300, 5, 12, 9, 6000.0, &mut rng)?;
    let points = ensemble_sweep(&a, &b, &factor_grid(6000.0, 2, 4))?;
    for p in &points {
        println!("f = {:10.2}: {} errors", p.value, p.errors);
    }
    match strict_interior_minimum(&points) {
        Some(i) => println!("strict interior minimum at f = {:.2}", points[i].value),
        None => println!("no strict interior minimum"),
    }
    Ok(())
}
