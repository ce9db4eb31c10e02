//! Two-class planar demonstration of discriminative alignment: per-class
//! one-feature networks trained by likelihood alone and with the
//! cross-entropy term, plus likelihood surfaces for contour plots.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scores::hash_line;
use super::synthetic::CloudPair;
use super::{derive_seed, sha256_hex};
use crate::error::{PbnError, Result};
use crate::expfam::Family;
use crate::layer::Activation;
use crate::network::{classify, NetworkModel, OutputDensitySpec};
use crate::train::{init_layer, train_pbn_da, AdamConfig, DaLossConfig, Head, Sample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Demo2dConfig {
    pub seed: u64,
    pub clouds: CloudPair,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Cross-entropy scale of the aligned models; the plain models use 0.
    pub ce_scale: f64,
    /// Indicator confidence while training.
    pub confidence: f64,
    /// Indicator confidence of the likelihood classifier and the grids.
    pub eval_confidence: f64,
    pub epochs: usize,
    pub step: f64,
    pub batch_size: usize,
    /// Grid points per axis.
    pub grid: usize,
    /// Bounding box `[x_min, x_max, y_min, y_max]`; derived from the
    /// training data when absent.
    pub bounds: Option<[f64; 4]>,
}

impl Default for Demo2dConfig {
    fn default() -> Self {
        Demo2dConfig {
            seed: 1,
            clouds: CloudPair::default(),
            train_per_class: 50,
            test_per_class: 200,
            ce_scale: 3.0,
            confidence: 3.0,
            eval_confidence: 3.0,
            epochs: 300,
            step: 0.02,
            batch_size: 100,
            grid: 41,
            bounds: None,
        }
    }
}

impl Demo2dConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(PbnError::Config(
                "demo2d needs train and test samples".into(),
            ));
        }
        if self.grid < 2 {
            return Err(PbnError::Config(
                "the grid needs at least 2 points per axis".into(),
            ));
        }
        if !(self.eval_confidence > 0.0) {
            return Err(PbnError::Config("eval_confidence must be > 0".into()));
        }
        if !(self.ce_scale > 0.0) {
            return Err(PbnError::Config(
                "the aligned models need ce_scale > 0".into(),
            ));
        }
        self.train_config(0, self.ce_scale).validate()
    }

    fn train_config(&self, class_index: usize, ce_scale: f64) -> DaLossConfig {
        DaLossConfig {
            ce_scale,
            class_index,
            train_confidence: self.confidence,
            head: Head::Binary,
            optimizer: AdamConfig {
                step: self.step,
                ..Default::default()
            },
            epochs: self.epochs,
            batch_size: self.batch_size,
            patience: 20,
            tol: 1e-3,
            ..Default::default()
        }
    }

    pub fn hash(&self) -> String {
        sha256_hex(toml::to_string(self).unwrap_or_default().as_bytes())
    }
}

/// Outcome of one model pair (plain or aligned).
#[derive(Clone, Debug, PartialEq)]
pub struct DemoVariant {
    pub ce_scale: f64,
    pub models: Vec<NetworkModel>,
    /// One-vs-rest forward errors of each class model on its training data
    /// after the last epoch.
    pub train_forward_errors: Vec<usize>,
    /// Errors of the likelihood classifier on the test data.
    pub test_likelihood_errors: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Demo2dReport {
    pub plain: DemoVariant,
    pub aligned: DemoVariant,
    pub test_total: usize,
    pub config_hash: String,
}

impl Demo2dReport {
    pub fn summary_csv(&self) -> String {
        let mut s = hash_line(Some(&self.config_hash));
        s.push_str("model,ce_scale,train_forward_errors,test_likelihood_errors,test_total\n");
        for (name, v) in [("plain", &self.plain), ("aligned", &self.aligned)] {
            let fwd: usize = v.train_forward_errors.iter().sum();
            let _ = writeln!(
                s,
                "{name},{},{fwd},{},{}",
                v.ce_scale, v.test_likelihood_errors, self.test_total
            );
        }
        s
    }
}

/// One feature with a single indicator unit; "this class" is `y -> 1`
/// whichever class the model belongs to.
fn demo_net(confidence: f64, rng: &mut ChaCha8Rng) -> Result<NetworkModel> {
    let l = init_layer(
        2,
        1,
        Family::Gaussian,
        Activation::Family(Family::TruncExponential),
        rng,
    )?;
    NetworkModel::new(vec![l], OutputDensitySpec::ted_indicator(0, 1, confidence))
}

fn likelihood_errors(models: &[NetworkModel], test: &[Sample]) -> Result<usize> {
    let mut errors = 0;
    for s in test {
        match classify(models, &s.x, None) {
            Ok((c, _)) if c == s.label => {}
            Ok(_) | Err(PbnError::Classification) => errors += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(errors)
}

fn train_variant(
    cfg: &Demo2dConfig,
    ce_scale: f64,
    train: &[Sample],
    test: &[Sample],
    tag: u64,
) -> Result<DemoVariant> {
    let mut models = Vec::with_capacity(2);
    let mut forward = Vec::with_capacity(2);
    for m in 0..2 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[tag, m as u64]));
        let mut net = demo_net(cfg.confidence, &mut rng)?;
        let history = train_pbn_da(&mut net, train, &cfg.train_config(m, ce_scale), &mut rng)
            .map_err(|e| e.at_stage("train"))?;
        net.output = net.output.with_confidence(cfg.eval_confidence);
        forward.push(history.epochs.last().map_or(train.len(), |r| r.errors));
        models.push(net);
    }
    Ok(DemoVariant {
        ce_scale,
        test_likelihood_errors: likelihood_errors(&models, test)?,
        models,
        train_forward_errors: forward,
    })
}

/// Log-likelihood of `model` on a regular grid, as `x,y,loglik` rows.
pub fn grid_csv(model: &NetworkModel, bounds: [f64; 4], n: usize, config_hash: &str) -> String {
    let mut s = hash_line(Some(config_hash));
    s.push_str("x,y,loglik\n");
    for i in 0..n {
        for j in 0..n {
            let x = bounds[0] + (bounds[1] - bounds[0]) * i as f64 / (n - 1) as f64;
            let y = bounds[2] + (bounds[3] - bounds[2]) * j as f64 / (n - 1) as f64;
            let ll = model
                .log_likelihood(&DVector::from_vec(vec![x, y]))
                .unwrap_or(f64::NEG_INFINITY);
            let _ = writeln!(s, "{x},{y},{ll}");
        }
    }
    s
}

fn data_bounds(data: &[Sample]) -> [f64; 4] {
    let mut b = [
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    ];
    for s in data {
        b[0] = b[0].min(s.x[0]);
        b[1] = b[1].max(s.x[0]);
        b[2] = b[2].min(s.x[1]);
        b[3] = b[3].max(s.x[1]);
    }
    let (px, py) = (0.25 * (b[1] - b[0]), 0.25 * (b[3] - b[2]));
    [b[0] - px, b[1] + px, b[2] - py, b[3] + py]
}

/// Train plain (`ce_scale = 0`) and aligned per-class models on two
/// synthetic clouds. With `out_dir`, writes one likelihood grid per model
/// and `summary.csv`.
pub fn demo2d(cfg: &Demo2dConfig, out_dir: Option<&Path>) -> Result<Demo2dReport> {
    cfg.validate().map_err(|e| e.at_stage("config"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[0]));
    let train = cfg.clouds.sample(cfg.train_per_class, &mut rng);
    let test = cfg.clouds.sample(cfg.test_per_class, &mut rng);
    let plain = train_variant(cfg, 0.0, &train, &test, 1)?;
    let aligned = train_variant(cfg, cfg.ce_scale, &train, &test, 2)?;
    let report = Demo2dReport {
        plain,
        aligned,
        test_total: test.len(),
        config_hash: cfg.hash(),
    };
    if let Some(dir) = out_dir {
        let write = |name: &str, text: String| -> Result<()> {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| PbnError::io(&path, e).at_stage("write"))
        };
        fs::create_dir_all(dir).map_err(|e| PbnError::io(dir, e).at_stage("write"))?;
        let bounds = cfg.bounds.unwrap_or_else(|| data_bounds(&train));
        for (name, v) in [("plain", &report.plain), ("aligned", &report.aligned)] {
            for (m, model) in v.models.iter().enumerate() {
                write(
                    &format!("grid_{name}_class{m}.csv"),
                    grid_csv(model, bounds, cfg.grid, &report.config_hash),
                )?;
            }
        }
        write("summary.csv", report.summary_csv())?;
    }
    Ok(report)
}
