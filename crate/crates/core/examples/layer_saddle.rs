//! One truncated-exponential layer: the saddle point of a feature, the
//! conditional mean it implies, and the first and corrected log densities.
//!
//! ```text
//! cargo run --example layer_saddle
//! ```

use nalgebra::DVector;
use pbn::expfam::Family;
use pbn::layer::{Activation, SpaOrder};
use pbn::train::init_layer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let layer = init_layer(8, 3, Family::TruncExponential, Activation::Linear, &mut rng)?;
    let x = DVector::from_fn(8, |i, _| 0.1 + 0.1 * i as f64);
    let (z, _) = layer.forward(&x)?;
    let (sol, trace) = layer.solve_saddle_traced(&z);
    let sol = sol?;
    println!("z = {:.4?}", z.as_slice());
    println!("h = {:.4?}", sol.h.as_slice());
    println!(
        "solver: {} iterations, residual {:.2e}",
        sol.iterations, sol.residual
    );
    for (i, r) in trace.iter().enumerate() {
        println!("  iter {i}: |residual| {r:.3e}");
    }
    println!("conditional mean {:.4?}", sol.xbar.as_slice());
    println!(
        "log p(z): first order {:.4}, corrected {:.4}",
        layer.log_p0z(&z, SpaOrder::First)?,
        layer.log_p0z(&z, SpaOrder::Corrected)?
    );
    println!("log J(x) = {:.4}", layer.log_j(&x)?);
    Ok(())
}
