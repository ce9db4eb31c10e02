mod common;

use std::f64::consts::PI;

use common::{input_in, random_net};

use nalgebra::{DMatrix, DVector};
use pbn::error::PbnError;
use pbn::expfam::Family;
use pbn::layer::{Activation, LayerSpec};
use pbn::network::{NetworkModel, OutputDensitySpec};
use pbn::train::{
    circular_shift, da_grad, da_loss, flatten_grads, fractional_shift, grad_check, init_layer,
    train_pbn_da, AugmentConfig, DaLossConfig, Head, Sample,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// TED mean and variance for natural parameter `u`, from the closed forms.
fn ted_mean_var(u: f64) -> (f64, f64) {
    let m = 1.0 / (1.0 - (-u).exp()) - 1.0 / u;
    let v = 1.0 / (u * u) - u.exp() / (u.exp() - 1.0).powi(2);
    (m, v)
}

fn toy_2d() -> (NetworkModel, Vec<Sample>) {
    let w = DMatrix::from_column_slice(2, 1, &[1.5, -0.5]);
    let layer = LayerSpec::new(
        w,
        DVector::from_vec(vec![0.25]),
        Family::Gaussian,
        Activation::Family(Family::TruncExponential),
    )
    .unwrap();
    let net = NetworkModel::new(vec![layer], OutputDensitySpec::ted_indicator(0, 1, 2.0)).unwrap();
    let batch = vec![
        Sample {
            x: DVector::from_vec(vec![1.0, 0.5]),
            label: 0,
        },
        Sample {
            x: DVector::from_vec(vec![-0.3, 1.2]),
            label: 1,
        },
        Sample {
            x: DVector::from_vec(vec![0.7, -0.9]),
            label: 0,
        },
    ];
    (net, batch)
}

#[test]
fn hand_summed_toy_loss() {
    let (net, batch) = toy_2d();
    let cfg = DaLossConfig {
        ce_scale: 5.0,
        head: Head::Binary,
        train_confidence: 2.0,
        ..Default::default()
    };
    let (w0, w1, b, c): (f64, f64, f64, f64) = (1.5, -0.5, 0.25, 2.0);
    let wn2: f64 = w0 * w0 + w1 * w1;
    let mut nll = 0.0;
    let mut ce = 0.0;
    for s in &batch {
        let (x0, x1) = (s.x[0], s.x[1]);
        let z = w0 * x0 + w1 * x1;
        let u = b + z;
        let (y, var) = ted_mean_var(u);
        if s.label == 0 {
            let log_p0x = -0.5 * (x0 * x0 + x1 * x1) - (2.0 * PI).ln();
            let log_p0z = -z * z / (2.0 * wn2) - 0.5 * (2.0 * PI * wn2).ln();
            let log_g = c.ln() + c * y - (c.exp() - 1.0).ln();
            nll -= log_p0x - log_p0z + var.ln() + log_g;
        }
        let t = if s.label == 0 { 1.0 } else { 0.0 };
        ce += (1.0 + u.exp()).ln() - t * u;
    }
    let got = da_loss(&net, &batch, &cfg).unwrap();
    assert!((got.nll - nll).abs() < 1e-10, "{} vs {nll}", got.nll);
    assert!((got.ce - ce).abs() < 1e-12);
    assert!((got.loss - (nll + 5.0 * ce)).abs() < 1e-9);
    assert_eq!(got.valid, vec![true; 3]);
}

#[test]
fn gaussian_layer_gradient_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, m) = (6, 3);
    let w = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
    let x = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let layer = LayerSpec::new(
        w.clone(),
        DVector::zeros(m),
        Family::Gaussian,
        Activation::Linear,
    )
    .unwrap();
    let net = NetworkModel::new(vec![layer], OutputDensitySpec::none(m)).unwrap();
    let cfg = DaLossConfig {
        ce_scale: 0.0,
        ..Default::default()
    };
    let g = da_grad(
        &net,
        &[Sample {
            x: x.clone(),
            label: 0,
        }],
        &cfg,
    )
    .unwrap();
    // log G = log N(x; 0, I) - log N(W'x; 0, W'W)
    let gram_inv = (w.transpose() * &w).try_inverse().unwrap();
    let p = &w * &gram_inv * w.transpose();
    let resid = &x - &p * &x;
    let d_ll = &w * &gram_inv + &resid * x.transpose() * &w * &gram_inv;
    assert!(
        (&g.grads[0].w + &d_ll).amax() < 1e-9,
        "{}",
        (&g.grads[0].w + &d_ll).amax()
    );
    assert!(g.grads[0].b.amax() < 1e-12);
    let z = w.transpose() * &x;
    let ll = -0.5 * x.norm_squared()
        + 0.5 * z.dot(&(&gram_inv * &z))
        + 0.5 * (w.transpose() * &w).determinant().ln()
        - 0.5 * (n - m) as f64 * (2.0 * PI).ln();
    assert!((g.loss.loss + ll).abs() < 1e-10);
}

#[test]
fn gradient_decomposes_over_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let l0 = init_layer(
        5,
        3,
        Family::Gaussian,
        Activation::Family(Family::TruncGaussian),
        &mut rng,
    )
    .unwrap();
    let net = NetworkModel::new(vec![l0], OutputDensitySpec::none(3)).unwrap();
    let cfg = DaLossConfig {
        ce_scale: 0.0,
        ..Default::default()
    };
    let batch: Vec<Sample> = (0..4)
        .map(|_| Sample {
            x: DVector::from_fn(5, |_, _| rng.sample::<f64, _>(StandardNormal)),
            label: 0,
        })
        .collect();
    let whole = flatten_grads(&net, &da_grad(&net, &batch, &cfg).unwrap().grads);
    let mut sum = vec![0.0; whole.len()];
    for s in &batch {
        let g = flatten_grads(
            &net,
            &da_grad(&net, std::slice::from_ref(s), &cfg).unwrap().grads,
        );
        for (a, b) in sum.iter_mut().zip(g) {
            *a += b;
        }
    }
    for (a, b) in whole.iter().zip(&sum) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn check_fd(net: &NetworkModel, first: Family, rng: &mut ChaCha8Rng, head: Head) {
    let batch: Vec<Sample> = (0..5)
        .map(|i| Sample {
            x: DVector::from_fn(net.input_dim(), |_, _| input_in(first, rng)),
            label: i % net.output_dim(),
        })
        .collect();
    let cfg = DaLossConfig {
        ce_scale: 2.0,
        head,
        train_confidence: 1.5,
        ..Default::default()
    };
    assert!(pbn::train::parameter_count(net) <= 300);
    for r in grad_check(net, &batch, &cfg, 1e-5).unwrap() {
        assert!(
            r.max_rel_error <= 1e-4,
            "{}: rel error {}",
            r.name,
            r.max_rel_error
        );
    }
}

#[test]
fn finite_differences_every_family_pair() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for first in Family::ALL {
        for last in Family::ALL {
            let net = random_net(&[8, 4, 2], &[first, Family::TruncGaussian], last, &mut rng);
            check_fd(&net, first, &mut rng, Head::Softmax);
        }
    }
}

#[test]
fn finite_differences_three_layers() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for mid in Family::ALL {
        let net = random_net(
            &[12, 7, 4, 2],
            &[Family::TruncExponential, mid, Family::TruncGaussian],
            Family::TruncExponential,
            &mut rng,
        );
        check_fd(&net, Family::TruncExponential, &mut rng, Head::Binary);
    }
}

#[test]
fn finite_differences_gaussian_group() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let l0 = init_layer(9, 6, Family::Gaussian, Activation::Linear, &mut rng).unwrap();
    let mut l1 = init_layer(6, 4, Family::Gaussian, Activation::Linear, &mut rng).unwrap();
    l1.b = DVector::from_vec(vec![0.1, -0.2, 0.3, 0.0]);
    let l2 = init_layer(
        4,
        3,
        Family::Gaussian,
        Activation::Family(Family::TruncExponential),
        &mut rng,
    )
    .unwrap();
    let net = NetworkModel::new(
        vec![l0, l1, l2],
        OutputDensitySpec::ted_indicator(1, 3, 1.5),
    )
    .unwrap()
    .with_gaussian_group(2)
    .unwrap();
    check_fd(&net, Family::Gaussian, &mut rng, Head::Softmax);
}

/// A class-m sample whose mean exceeds the Exponential step margin.
fn failing_net() -> NetworkModel {
    let w = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
    let layer = LayerSpec::new(
        w,
        DVector::zeros(1),
        Family::Exponential,
        Activation::Linear,
    )
    .unwrap();
    NetworkModel::new(vec![layer], OutputDensitySpec::standard_normal(1)).unwrap()
}

#[test]
fn failed_samples_are_excluded() {
    let net = failing_net();
    let cfg = DaLossConfig {
        ce_scale: 0.0,
        ..Default::default()
    };
    let good = Sample {
        x: DVector::from_vec(vec![1.0, 2.0]),
        label: 0,
    };
    let bad = |v: f64| Sample {
        x: DVector::from_vec(vec![v, v]),
        label: 0,
    };
    let a = da_loss(&net, &[good.clone(), bad(1e7)], &cfg).unwrap();
    let b = da_loss(&net, &[good.clone(), bad(3e7)], &cfg).unwrap();
    assert_eq!(a.valid, vec![true, false]);
    assert_eq!(a.loss, b.loss);
    assert_eq!(a.loss, da_loss(&net, &[good], &cfg).unwrap().loss);
    assert!(matches!(
        da_loss(&net, &[bad(1e7)], &cfg),
        Err(PbnError::AllFailed)
    ));
}

fn gaussian_data(n: usize, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    let mix = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 0.8, 0.5, 0.0, -0.3, 0.2, 0.3]);
    (0..n)
        .map(|_| Sample {
            x: &mix * DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal)),
            label: 0,
        })
        .collect()
}

#[test]
fn likelihood_ascent_on_gaussian_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = gaussian_data(200, &mut rng);
    let l0 = init_layer(3, 2, Family::Gaussian, Activation::Linear, &mut rng).unwrap();
    let mut net = NetworkModel::new(vec![l0], OutputDensitySpec::standard_normal(2)).unwrap();
    let cfg = DaLossConfig {
        ce_scale: 0.0,
        epochs: 300,
        batch_size: 200,
        patience: 0,
        optimizer: pbn::train::AdamConfig {
            step: 0.01,
            ..Default::default()
        },
        ..Default::default()
    };
    let h = train_pbn_da(&mut net, &data, &cfg, &mut rng).unwrap();
    let nll: Vec<f64> = h.epochs.iter().map(|r| r.nll).collect();
    // best likelihood per 50-epoch window never gets worse
    let best: Vec<f64> = nll
        .chunks(50)
        .map(|w| w.iter().copied().fold(f64::INFINITY, f64::min))
        .collect();
    for pair in best.windows(2) {
        assert!(pair[1] <= pair[0] + 1e-9, "{best:?}");
    }
    assert!(nll.last().unwrap() < &(nll[0] - 0.1));
}

fn two_clouds(n: usize, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let label = i % 2;
            let c = if label == 0 { [1.0, 0.6] } else { [-1.0, -0.4] };
            Sample {
                x: DVector::from_fn(2, |j, _| c[j] + 0.45 * rng.sample::<f64, _>(StandardNormal)),
                label,
            }
        })
        .collect()
}

fn toy_net(rng: &mut ChaCha8Rng) -> NetworkModel {
    let l = init_layer(
        2,
        1,
        Family::Gaussian,
        Activation::Family(Family::TruncExponential),
        rng,
    )
    .unwrap();
    NetworkModel::new(vec![l], OutputDensitySpec::ted_indicator(0, 1, 1.0)).unwrap()
}

fn toy_cfg() -> DaLossConfig {
    DaLossConfig {
        ce_scale: 20.0,
        head: Head::Binary,
        epochs: 300,
        batch_size: 40,
        patience: 20,
        tol: 1e-3,
        optimizer: pbn::train::AdamConfig {
            step: 0.02,
            ..Default::default()
        },
        ..Default::default()
    }
}

#[test]
fn toy_training_reaches_zero_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let data = two_clouds(80, &mut rng);
    let mut net = toy_net(&mut rng);
    let h = train_pbn_da(&mut net, &data, &toy_cfg(), &mut rng).unwrap();
    let last = h.epochs.last().unwrap();
    assert_eq!(
        last.errors,
        0,
        "{:?}",
        &h.epochs[h.epochs.len().saturating_sub(5)..]
    );
    assert!(last.sampling_efficiency >= h.epochs[0].sampling_efficiency);
}

#[test]
fn training_is_deterministic() {
    let run = |parallel: bool| {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = two_clouds(40, &mut rng);
        let mut net = toy_net(&mut rng);
        let cfg = DaLossConfig {
            epochs: 20,
            parallel,
            ..toy_cfg()
        };
        let h = train_pbn_da(&mut net, &data, &cfg, &mut rng).unwrap();
        (h.to_csv(), pbn::train::get_params(&net))
    };
    let a = run(false);
    assert_eq!(a, run(false));
    assert_eq!(a, run(true));
}

#[test]
fn divergence_restores_parameters() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let data = two_clouds(20, &mut rng);
    let mut net = toy_net(&mut rng);
    let cfg = DaLossConfig {
        optimizer: pbn::train::AdamConfig {
            step: f64::MAX,
            ..Default::default()
        },
        ..toy_cfg()
    };
    let err = train_pbn_da(&mut net, &data, &cfg, &mut rng).unwrap_err();
    assert!(matches!(err, PbnError::TrainingDiverged { .. }), "{err}");
    assert!(pbn::train::get_params(&net).iter().all(|v| v.is_finite()));
}

#[test]
fn fractional_half_shifts_compose() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = DMatrix::from_fn(9, 7, |_, _| rng.sample::<f64, _>(StandardNormal));
    let twice = fractional_shift(&fractional_shift(&x, 0.5, 0.5), 0.5, 0.5);
    assert!((twice - circular_shift(&x, 1, 1)).amax() < 1e-8);
    assert!((fractional_shift(&x, 0.0, 0.0) - &x).amax() < 1e-12);
}

proptest! {
    #[test]
    fn integer_shifts_invert_and_keep_mean(
        t in 1usize..12, b in 1usize..9, dt in -20i64..20, db in -20i64..20, seed in 0u64..1000
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(t, b, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = circular_shift(&x, dt, db);
        prop_assert_eq!(circular_shift(&y, -dt, -db), x.clone());
        let mut a: Vec<f64> = x.iter().copied().collect();
        let mut c: Vec<f64> = y.iter().copied().collect();
        a.sort_by(f64::total_cmp);
        c.sort_by(f64::total_cmp);
        prop_assert_eq!(a, c);
    }

    #[test]
    fn augment_keeps_shape(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = AugmentConfig { frames: 6, bands: 4, time_shift: 3, freq_shift: 1, fractional: seed % 2 == 0 };
        let x = DVector::from_fn(24, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = pbn::train::augment_vector(&x, &cfg, &mut rng).unwrap();
        prop_assert_eq!(y.len(), 24);
        prop_assert!((y.sum() - x.sum()).abs() < 1e-9);
    }
}
