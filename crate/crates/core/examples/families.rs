//! The four input families: cumulants at a few natural parameters, the
//! activation and its inverse, and a Monte Carlo check of the mean.
//!
//! ```text
//! cargo run --example families
//! ```

use pbn::expfam::Family;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for family in [
        Family::Gaussian,
        Family::TruncGaussian,
        Family::Exponential,
        Family::TruncExponential,
    ] {
        let spec = family.spec();
        println!("{} (domain {})", spec.name(), spec.domain.name());
        for alpha in [-2.0, -0.1, 0.7] {
            if spec.check_alpha(alpha).is_err() {
                println!("  alpha {alpha:5}: outside the parameter domain");
                continue;
            }
            let c = spec.cumulants(alpha)?;
            let back = spec.activation_inverse(c.mean)?;
            let n = 20_000;
            let mc = (0..n)
                .map(|_| spec.sample(alpha, &mut rng))
                .sum::<Result<f64, _>>()?
                / n as f64;
            println!(
                "  alpha {alpha:5}: mean {:.4} (sampled {mc:.4}) var {:.4} third {:.4} inverse {back:.4}",
                c.mean, c.var, c.third
            );
        }
    }
    Ok(())
}
