//! Discriminative alignment of one class model on the synthetic band
//! sequences: per-epoch likelihood, cross-entropy and forward errors.
//!
//! ```text
//! cargo run --release --example train_alignment
//! ```

use pbn::expfam::Family;
use pbn::harness::synthetic::SequenceConfig;
use pbn::layer::Activation;
use pbn::network::{NetworkModel, OutputDensitySpec};
use pbn::train::{init_layer, train_pbn_da, AdamConfig, DaLossConfig, Head};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let seq = SequenceConfig::default();
    let data = seq.sample(40, &mut rng)?;
    let k = seq.num_classes();
    let dim = data[0].x.len();

    let l0 = init_layer(
        dim,
        12,
        Family::Gaussian,
        Activation::Family(Family::TruncGaussian),
        &mut rng,
    )?;
    let l1 = init_layer(
        12,
        k,
        Family::TruncGaussian,
        Activation::Family(Family::TruncExponential),
        &mut rng,
    )?;
    let mut net = NetworkModel::new(vec![l0, l1], OutputDensitySpec::ted_indicator(0, k, 3.0))?;
    let cfg = DaLossConfig {
        class_index: 0,
        ce_scale: 3.0,
        train_confidence: 3.0,
        head: Head::Softmax,
        optimizer: AdamConfig {
            step: 0.01,
            ..Default::default()
        },
        epochs: 40,
        batch_size: 30,
        ..Default::default()
    };
    let history = train_pbn_da(&mut net, &data, &cfg, &mut rng)?;
    for r in history.epochs.iter().step_by(5) {
        println!(
            "epoch {:3}: nll {:9.3} ce {:.4} forward errors {:3} efficiency {:.2}",
            r.epoch, r.nll, r.ce, r.errors, r.sampling_efficiency
        );
    }
    Ok(())
}
