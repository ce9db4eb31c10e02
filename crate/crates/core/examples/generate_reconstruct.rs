//! A two-layer network: draw inputs from it, reconstruct an input from its
//! features, save the model and load it back.
//!
//! ```text
//! cargo run --example generate_reconstruct
//! ```

use nalgebra::DVector;
use pbn::container::{load_model, save_model, ModelBundle, ModelMeta};
use pbn::expfam::Family;
use pbn::layer::Activation;
use pbn::network::{NetworkModel, OutputDensitySpec};
use pbn::train::init_layer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let l0 = init_layer(
        12,
        6,
        Family::Gaussian,
        Activation::Family(Family::TruncGaussian),
        &mut rng,
    )?;
    let l1 = init_layer(6, 2, Family::TruncGaussian, Activation::Linear, &mut rng)?;
    let net = NetworkModel::new(vec![l0, l1], OutputDensitySpec::standard_normal(2))?;

    for i in 0..3 {
        let x = net.generate(&mut rng, 20)?;
        println!("sample {i}: log L = {:.3}", net.log_likelihood(&x)?);
    }

    let x = DVector::from_fn(12, |i, _| (i as f64 * 0.7).sin());
    let r = net.reconstruct(&x)?;
    let (_, y) = net.forward(&x)?;
    let (_, y_r) = net.forward(&r)?;
    println!("input          {:.3?}", x.as_slice());
    println!("reconstruction {:.3?}", r.as_slice());
    println!("features agree to {:.2e}", (y - y_r).amax());

    let dir = std::env::temp_dir().join("pbn-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("net.pbn");
    let bundle = ModelBundle {
        network: net,
        hmm: None,
    };
    save_model(
        &path,
        &bundle,
        &ModelMeta::describe(&bundle, 0, "example", "none"),
    )?;
    let back = load_model(&path)?;
    println!(
        "reloaded from {}: identical = {}",
        path.display(),
        back == bundle
    );
    Ok(())
}
