//! Discriminative-alignment training: the class-m log-likelihood is maximized
//! while a scaled cross-entropy of the forward network is minimized.
//! Gradients go through the saddle point by implicit differentiation.

use std::borrow::Cow;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{PbnError, Result};
use crate::expfam::Family;
use crate::layer::{Activation, LayerSpec, SpaOrder};
use crate::network::{argmax_first, Group, LayerGrad, NetworkModel, OutputKind};

/// How the forward network's logits enter the cross-entropy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// K-way softmax over the final layer.
    #[default]
    Softmax,
    /// Logistic loss on one unit: class m against the rest.
    Binary,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub step: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            step: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Random circular shifts of a time-major `frames x bands` map.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub frames: usize,
    pub bands: usize,
    /// Largest time shift, in frames.
    pub time_shift: usize,
    /// Largest frequency shift, in bands.
    pub freq_shift: usize,
    /// Draw shifts from a continuous range and apply them by Fourier phase ramp.
    pub fractional: bool,
}

impl AugmentConfig {
    pub fn is_identity(&self) -> bool {
        self.time_shift == 0 && self.freq_shift == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_identity() {
            return Ok(());
        }
        if self.frames == 0 || self.bands == 0 {
            return Err(PbnError::Config("augmentation needs the map shape".into()));
        }
        if self.time_shift > self.frames || self.freq_shift > self.bands {
            return Err(PbnError::Config(format!(
                "shift bounds ({}, {}) exceed the map shape {}x{}",
                self.time_shift, self.freq_shift, self.frames, self.bands
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DaLossConfig {
    /// Scale applied to the cross-entropy before it is subtracted.
    pub ce_scale: f64,
    pub class_index: usize,
    /// Indicator confidence used while training.
    pub train_confidence: f64,
    pub head: Head,
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub augmentation: AugmentConfig,
    /// Epoch window for the likelihood plateau test.
    pub patience: usize,
    /// Smallest per-sample likelihood gain over `patience` epochs that
    /// counts as progress.
    pub tol: f64,
    /// Evaluate the samples of a batch on the rayon pool.
    pub parallel: bool,
}

impl Default for DaLossConfig {
    fn default() -> Self {
        DaLossConfig {
            ce_scale: 1000.0,
            class_index: 0,
            train_confidence: 1.0,
            head: Head::Softmax,
            optimizer: AdamConfig::default(),
            epochs: 100,
            batch_size: 32,
            augmentation: AugmentConfig::default(),
            patience: 20,
            tol: 1e-4,
            parallel: false,
        }
    }
}

impl DaLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ce_scale >= 0.0) || !self.ce_scale.is_finite() {
            return Err(PbnError::Config(format!(
                "ce_scale must be >= 0 (got {})",
                self.ce_scale
            )));
        }
        if !(self.optimizer.step > 0.0) {
            return Err(PbnError::Config("optimizer step size must be > 0".into()));
        }
        let b = &self.optimizer;
        if !(0.0..1.0).contains(&b.beta1) || !(0.0..1.0).contains(&b.beta2) || !(b.eps > 0.0) {
            return Err(PbnError::Config("need 0 <= beta < 1 and eps > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(PbnError::Config("batch size must be positive".into()));
        }
        if !(self.train_confidence > 0.0) {
            return Err(PbnError::Config("train_confidence must be > 0".into()));
        }
        self.augmentation.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: DVector<f64>,
    pub label: usize,
}

/// Loss terms of one batch. `valid[i]` is false when sample i is in class m
/// but its saddle-point solve failed, so it was left out of `nll`.
#[derive(Clone, Debug, PartialEq)]
pub struct DaLoss {
    pub loss: f64,
    /// `-sum log G(x)` over the valid class-m samples.
    pub nll: f64,
    /// Unscaled cross-entropy summed over the batch.
    pub ce: f64,
    pub valid: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct DaGrad {
    pub loss: DaLoss,
    pub grads: Vec<LayerGrad>,
}

/// Analytic against central-difference gradient for one trainable tensor.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
}

struct SampleTerms {
    ll: Option<f64>,
    ce: f64,
    valid: bool,
    grads: Option<Vec<LayerGrad>>,
}

/// The model as trained: an indicator output takes the training confidence.
fn training_view<'a>(model: &'a NetworkModel, cfg: &DaLossConfig) -> Cow<'a, NetworkModel> {
    if model.output.kind == OutputKind::TedIndicator
        && model.output.confidence != cfg.train_confidence
    {
        let mut m = model.clone();
        m.output = m.output.with_confidence(cfg.train_confidence);
        Cow::Owned(m)
    } else {
        Cow::Borrowed(model)
    }
}

fn head_unit(cfg: &DaLossConfig, k: usize) -> usize {
    if k == 1 {
        0
    } else {
        cfg.class_index
    }
}

/// Cross-entropy of the logits and its gradient.
fn cross_entropy(
    logits: &DVector<f64>,
    label: usize,
    cfg: &DaLossConfig,
) -> Result<(f64, DVector<f64>)> {
    let k = logits.len();
    match cfg.head {
        Head::Softmax => {
            if label >= k {
                return Err(PbnError::Dimension(format!(
                    "label {label} does not index the {k} output units"
                )));
            }
            let max = logits.max();
            let e = logits.map(|u| (u - max).exp());
            let sum = e.sum();
            let ce = sum.ln() + max - logits[label];
            let mut g = e / sum;
            g[label] -= 1.0;
            Ok((ce, g))
        }
        Head::Binary => {
            let j = head_unit(cfg, k);
            if j >= k {
                return Err(PbnError::Dimension(format!("class {j} has no output unit")));
            }
            let u = logits[j];
            let t = if label == cfg.class_index { 1.0 } else { 0.0 };
            // softplus(u) - t u, computed without overflow
            let ce = u.max(0.0) + (-u.abs()).exp().ln_1p() - t * u;
            let mut g = DVector::zeros(k);
            g[j] = 1.0 / (1.0 + (-u).exp()) - t;
            Ok((ce, g))
        }
    }
}

/// One-vs-rest decision of the forward network for class m.
pub fn forward_says_class(logits: &DVector<f64>, cfg: &DaLossConfig) -> bool {
    match cfg.head {
        Head::Softmax => argmax_first(logits.as_slice()) == Some(cfg.class_index),
        Head::Binary => logits[head_unit(cfg, logits.len())] > 0.0,
    }
}

fn sample_terms(
    model: &NetworkModel,
    group: Option<&Group>,
    s: &Sample,
    cfg: &DaLossConfig,
    with_ll: bool,
    with_grad: bool,
) -> Result<SampleTerms> {
    let in_class = with_ll && s.label == cfg.class_index;
    let (_, logits) = model.forward(&s.x)?;
    let (ce, dce) = cross_entropy(&logits, s.label, cfg)?;
    let dlogits = (cfg.ce_scale != 0.0).then(|| cfg.ce_scale * dce);
    if !with_grad {
        let ll = if in_class {
            match model.log_likelihood(&s.x) {
                Ok(v) => Some(v),
                Err(e) if e.is_sampling_failure() => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        return Ok(SampleTerms {
            valid: !in_class || ll.is_some(),
            ll,
            ce,
            grads: None,
        });
    }
    if in_class {
        match model.objective_grad(&s.x, group, -1.0, dlogits.as_ref()) {
            Ok((v, g)) => {
                return Ok(SampleTerms {
                    ll: v,
                    ce,
                    valid: true,
                    grads: Some(g),
                })
            }
            Err(e) if e.is_sampling_failure() => {}
            Err(e) => return Err(e),
        }
    }
    let (_, g) = model.objective_grad(&s.x, group, 0.0, dlogits.as_ref())?;
    Ok(SampleTerms {
        ll: None,
        ce,
        valid: !in_class,
        grads: Some(g),
    })
}

fn batch_terms(
    model: &NetworkModel,
    batch: &[Sample],
    cfg: &DaLossConfig,
    with_ll: bool,
    with_grad: bool,
) -> Result<(DaLoss, Option<Vec<LayerGrad>>)> {
    if batch.is_empty() {
        return Err(PbnError::EmptyBatch);
    }
    if with_grad && model.spa_order != SpaOrder::First {
        return Err(PbnError::Config(
            "gradients are available for the first-order SPA only".into(),
        ));
    }
    let group = model.group(model.layers.len())?;
    let eval = |s: &Sample| sample_terms(model, group.as_ref(), s, cfg, with_ll, with_grad);
    let terms: Vec<Result<SampleTerms>> = if cfg.parallel {
        batch.par_iter().map(eval).collect()
    } else {
        batch.iter().map(eval).collect()
    };
    // sequential reduction keeps the sum order fixed
    let mut nll = 0.0;
    let mut ce = 0.0;
    let mut valid = Vec::with_capacity(batch.len());
    let mut any_class = false;
    let mut any_valid_class = false;
    let mut grads: Option<Vec<LayerGrad>> = None;
    for (s, t) in batch.iter().zip(terms) {
        let t = t?;
        if with_ll && s.label == cfg.class_index {
            any_class = true;
            any_valid_class |= t.valid;
        }
        if let Some(ll) = t.ll {
            nll -= ll;
        }
        ce += t.ce;
        valid.push(t.valid);
        if let Some(g) = t.grads {
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(g) {
                        a.w += b.w;
                        a.b += b.b;
                    }
                }
            }
        }
    }
    if any_class && !any_valid_class {
        return Err(PbnError::AllFailed);
    }
    Ok((
        DaLoss {
            loss: nll + cfg.ce_scale * ce,
            nll,
            ce,
            valid,
        },
        grads,
    ))
}

/// `-sum_{class m, valid} log G(x) + s * sum CE(x)`.
pub fn da_loss(model: &NetworkModel, batch: &[Sample], cfg: &DaLossConfig) -> Result<DaLoss> {
    let model = training_view(model, cfg);
    Ok(batch_terms(&model, batch, cfg, true, false)?.0)
}

/// Loss and its exact gradient in every layer's weight and bias.
pub fn da_grad(model: &NetworkModel, batch: &[Sample], cfg: &DaLossConfig) -> Result<DaGrad> {
    let model = training_view(model, cfg);
    let (loss, grads) = batch_terms(&model, batch, cfg, true, true)?;
    Ok(DaGrad {
        loss,
        grads: grads.expect("gradients requested"),
    })
}

/// Trainable tensors of a layer: shared kernel and channel bias for
/// convolutions, otherwise the full weight and bias.
pub fn parameter_names(model: &NetworkModel) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for (k, l) in model.layers.iter().enumerate() {
        match &l.conv {
            Some(c) => {
                out.push((format!("layer{k}.kernel"), c.kernel_len()));
                out.push((format!("layer{k}.bias"), c.out_ch));
            }
            None => {
                out.push((format!("layer{k}.w"), l.w.len()));
                out.push((format!("layer{k}.b"), l.b.len()));
            }
        }
    }
    out
}

pub fn parameter_count(model: &NetworkModel) -> usize {
    parameter_names(model).iter().map(|(_, n)| n).sum()
}

/// Trainable parameters, weights column-major.
pub fn get_params(model: &NetworkModel) -> Vec<f64> {
    let mut p = Vec::with_capacity(parameter_count(model));
    for l in &model.layers {
        match &l.conv {
            Some(c) => {
                p.extend(c.extract_kernel(&l.w));
                p.extend(c.extract_bias(&l.b));
            }
            None => {
                p.extend(l.w.iter());
                p.extend(l.b.iter());
            }
        }
    }
    p
}

pub fn set_params(model: &mut NetworkModel, p: &[f64]) -> Result<()> {
    if p.len() != parameter_count(model) {
        return Err(PbnError::Dimension(format!(
            "{} parameters given, model has {}",
            p.len(),
            parameter_count(model)
        )));
    }
    let mut at = 0;
    for l in &mut model.layers {
        match l.conv {
            Some(c) => {
                let n = c.kernel_len();
                l.w = c.materialize(&p[at..at + n])?;
                at += n;
                l.b = c.expand_bias(&p[at..at + c.out_ch]);
                at += c.out_ch;
            }
            None => {
                let (r, cols) = l.w.shape();
                l.w = DMatrix::from_column_slice(r, cols, &p[at..at + r * cols]);
                at += r * cols;
                let m = l.b.len();
                l.b = DVector::from_column_slice(&p[at..at + m]);
                at += m;
            }
        }
    }
    Ok(())
}

/// Layer gradients flattened in the order of [`get_params`].
pub fn flatten_grads(model: &NetworkModel, grads: &[LayerGrad]) -> Vec<f64> {
    let mut out = Vec::with_capacity(parameter_count(model));
    for (l, g) in model.layers.iter().zip(grads) {
        match &l.conv {
            Some(c) => {
                out.extend(c.fold_gradient(&g.w));
                out.extend(c.fold_bias_gradient(&g.b));
            }
            None => {
                out.extend(g.w.iter());
                out.extend(g.b.iter());
            }
        }
    }
    out
}

/// Compare [`da_grad`] with central differences of [`da_loss`] at `step`.
/// The relative error of each entry is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check(
    model: &NetworkModel,
    batch: &[Sample],
    cfg: &DaLossConfig,
    step: f64,
) -> Result<Vec<GradCheckReport>> {
    let analytic = flatten_grads(model, &da_grad(model, batch, cfg)?.grads);
    let base = get_params(model);
    let mut probe = model.clone();
    let mut numeric = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + step;
        set_params(&mut probe, &p)?;
        let up = da_loss(&probe, batch, cfg)?.loss;
        p[i] = base[i] - step;
        set_params(&mut probe, &p)?;
        let down = da_loss(&probe, batch, cfg)?.loss;
        numeric.push((up - down) / (2.0 * step));
    }
    let mut reports = Vec::new();
    let mut at = 0;
    for (name, n) in parameter_names(model) {
        let a = analytic[at..at + n].to_vec();
        let f = numeric[at..at + n].to_vec();
        let max_rel_error = a
            .iter()
            .zip(&f)
            .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(1e-8))
            .fold(0.0, f64::max);
        reports.push(GradCheckReport {
            name,
            analytic: a,
            numeric: f,
            max_rel_error,
        });
        at += n;
    }
    Ok(reports)
}

/// A dense layer with weights drawn from N(0, 1/N_in) and zero bias, which
/// puts the initial pre-activations where the activation slope is largest.
pub fn init_layer<R: Rng + ?Sized>(
    n_in: usize,
    n_out: usize,
    input_family: Family,
    activation: Activation,
    rng: &mut R,
) -> Result<LayerSpec> {
    let scale = 1.0 / (n_in as f64).sqrt();
    let w = DMatrix::from_fn(n_in, n_out, |_, _| {
        scale * rng.sample::<f64, _>(StandardNormal)
    });
    LayerSpec::new(w, DVector::zeros(n_out), input_family, activation)
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean `-log G(x)` over the valid class-m samples.
    pub nll: f64,
    /// Mean cross-entropy over all samples.
    pub ce: f64,
    /// One-vs-rest forward classification errors.
    pub errors: usize,
    /// Fraction of class-m samples that auto-encode.
    pub sampling_efficiency: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub stopped_early: bool,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,nll,ce,errors,sampling_efficiency\n");
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.epoch, r.nll, r.ce, r.errors, r.sampling_efficiency
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| PbnError::io(path, e))
    }
}

/// Per-sample full-dataset terms: (class-m log-likelihood, CE, forward
/// error, auto-encodes). The likelihood is skipped unless `with_ll`.
type SampleStats = (Option<Option<f64>>, f64, bool, Option<bool>);

fn dataset_stats(
    model: &NetworkModel,
    data: &[Sample],
    cfg: &DaLossConfig,
    with_ll: bool,
) -> Result<Vec<SampleStats>> {
    let stats = |s: &Sample| -> Result<SampleStats> {
        let (_, logits) = model.forward(&s.x)?;
        let (ce, _) = cross_entropy(&logits, s.label, cfg)?;
        let wrong = forward_says_class(&logits, cfg) != (s.label == cfg.class_index);
        if s.label != cfg.class_index {
            return Ok((None, ce, wrong, None));
        }
        let ll = if with_ll {
            match model.log_likelihood(&s.x) {
                Ok(v) => Some(v),
                Err(e) if e.is_sampling_failure() => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        let encodes = match model.reconstruct(&s.x) {
            Ok(r) => r.iter().all(|v| v.is_finite()),
            Err(e) if e.is_sampling_failure() => false,
            Err(PbnError::Range { .. } | PbnError::Parameter { .. } | PbnError::Domain { .. }) => {
                false
            }
            Err(e) => return Err(e),
        };
        Ok((Some(ll), ce, wrong, Some(encodes)))
    };
    if cfg.parallel {
        data.par_iter().map(stats).collect()
    } else {
        data.iter().map(stats).collect()
    }
}

fn errors_and_efficiency(rows: &[SampleStats]) -> (usize, f64) {
    let errors = rows.iter().filter(|r| r.2).count();
    let class: Vec<bool> = rows.iter().filter_map(|r| r.3).collect();
    let eff = if class.is_empty() {
        1.0
    } else {
        class.iter().filter(|e| **e).count() as f64 / class.len() as f64
    };
    (errors, eff)
}

/// Full-dataset statistics of the current model.
pub fn evaluate_epoch(
    model: &NetworkModel,
    data: &[Sample],
    cfg: &DaLossConfig,
    epoch: usize,
) -> Result<EpochRecord> {
    let model = training_view(model, cfg);
    let rows = dataset_stats(&model, data, cfg, true)?;
    let (errors, sampling_efficiency) = errors_and_efficiency(&rows);
    let lls: Vec<f64> = rows.iter().filter_map(|r| r.0.flatten()).collect();
    let ce: f64 = rows.iter().map(|r| r.1).sum();
    Ok(EpochRecord {
        epoch,
        nll: if lls.is_empty() {
            f64::NAN
        } else {
            -lls.iter().sum::<f64>() / lls.len() as f64
        },
        ce: if data.is_empty() {
            0.0
        } else {
            ce / data.len() as f64
        },
        errors,
        sampling_efficiency,
    })
}

struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(cfg: AdamConfig, n: usize) -> Self {
        Adam {
            cfg,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, p: &mut [f64], g: &[f64]) {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for i in 0..p.len() {
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g[i] * g[i];
            p[i] -= c.step * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + c.eps);
        }
    }
}

/// Minibatch Adam on [`da_loss`]. The model is updated in place. On a
/// non-finite loss it is restored to the last good parameters and
/// `TrainingDiverged` is returned, so the caller can checkpoint it.
pub fn train_pbn_da<R: Rng + ?Sized>(
    model: &mut NetworkModel,
    data: &[Sample],
    cfg: &DaLossConfig,
    rng: &mut R,
) -> Result<History> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(PbnError::EmptyBatch);
    }
    if model.output.kind == OutputKind::TedIndicator {
        model.output = model.output.with_confidence(cfg.train_confidence);
    }
    let mut params = get_params(model);
    let mut good = params.clone();
    let mut adam = Adam::new(cfg.optimizer, params.len());
    let mut history = History::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        // nll and ce are accumulated from the minibatch passes
        let (mut nll, mut n_ll, mut ce) = (0.0, 0usize, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| {
                    let s = &data[i];
                    Ok(Sample {
                        x: augment_vector(&s.x, &cfg.augmentation, rng)?,
                        label: s.label,
                    })
                })
                .collect::<Result<_>>()?;
            let (loss, grads) = match batch_terms(model, &batch, cfg, true, true) {
                Err(PbnError::AllFailed) => batch_terms(model, &batch, cfg, false, true)?,
                r => r?,
            };
            let g = flatten_grads(model, &grads.expect("gradients requested"));
            nll += loss.nll;
            n_ll += batch
                .iter()
                .zip(&loss.valid)
                .filter(|(s, v)| **v && s.label == cfg.class_index)
                .count();
            ce += loss.ce;
            if !loss.loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
                set_params(model, &good)?;
                return Err(PbnError::TrainingDiverged { epoch });
            }
            good.clone_from(&params);
            adam.step(&mut params, &g);
            if params.iter().any(|v| !v.is_finite()) {
                set_params(model, &good)?;
                return Err(PbnError::TrainingDiverged { epoch });
            }
            set_params(model, &params)?;
        }
        let rows = dataset_stats(model, data, cfg, false)?;
        let (errors, sampling_efficiency) = errors_and_efficiency(&rows);
        let record = EpochRecord {
            epoch,
            nll: if n_ll > 0 {
                nll / n_ll as f64
            } else {
                f64::NAN
            },
            ce: ce / data.len() as f64,
            errors,
            sampling_efficiency,
        };
        history.epochs.push(record);
        if errors == 0 && plateaued(&history.epochs, cfg) {
            history.stopped_early = true;
            break;
        }
    }
    Ok(history)
}

fn plateaued(epochs: &[EpochRecord], cfg: &DaLossConfig) -> bool {
    let n = epochs.len();
    if cfg.patience == 0 || n <= cfg.patience {
        return false;
    }
    let (then, now) = (epochs[n - 1 - cfg.patience].nll, epochs[n - 1].nll);
    if !now.is_finite() || !then.is_finite() {
        return now.is_nan() && then.is_nan();
    }
    then - now < cfg.tol
}

/// Circular shift of a time-major map: `out[t][b] = x[t - dt][b - db]`.
pub fn circular_shift(x: &DMatrix<f64>, dt: i64, db: i64) -> DMatrix<f64> {
    let (t, b) = x.shape();
    DMatrix::from_fn(t, b, |i, j| {
        let si = (i as i64 - dt).rem_euclid(t as i64) as usize;
        let sj = (j as i64 - db).rem_euclid(b as i64) as usize;
        x[(si, sj)]
    })
}

fn fft_axis(data: &mut [Complex<f64>], rows: usize, cols: usize, along_rows: bool, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (len, count) = if along_rows {
        (cols, rows)
    } else {
        (rows, cols)
    };
    let fft = if inverse {
        planner.plan_fft_inverse(len)
    } else {
        planner.plan_fft_forward(len)
    };
    let mut buf = vec![Complex::new(0.0, 0.0); len];
    for k in 0..count {
        for i in 0..len {
            buf[i] = if along_rows {
                data[k * cols + i]
            } else {
                data[i * cols + k]
            };
        }
        fft.process(&mut buf);
        for i in 0..len {
            if along_rows {
                data[k * cols + i] = buf[i];
            } else {
                data[i * cols + k] = buf[i];
            }
        }
    }
}

fn signed_freq(k: usize, n: usize) -> f64 {
    if 2 * k <= n {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

/// Shift by a real number of frames and bands using a 2-D Fourier phase
/// ramp. Composition is exact when neither dimension has a Nyquist bin.
pub fn fractional_shift(x: &DMatrix<f64>, dt: f64, db: f64) -> DMatrix<f64> {
    let (rows, cols) = x.shape();
    let mut data: Vec<Complex<f64>> = (0..rows * cols)
        .map(|i| Complex::new(x[(i / cols, i % cols)], 0.0))
        .collect();
    fft_axis(&mut data, rows, cols, true, false);
    fft_axis(&mut data, rows, cols, false, false);
    for i in 0..rows {
        for j in 0..cols {
            let phase = -2.0
                * std::f64::consts::PI
                * (signed_freq(i, rows) * dt / rows as f64
                    + signed_freq(j, cols) * db / cols as f64);
            data[i * cols + j] *= Complex::from_polar(1.0, phase);
        }
    }
    fft_axis(&mut data, rows, cols, false, true);
    fft_axis(&mut data, rows, cols, true, true);
    let scale = 1.0 / (rows * cols) as f64;
    DMatrix::from_fn(rows, cols, |i, j| data[i * cols + j].re * scale)
}

fn draw_shift<R: Rng + ?Sized>(max: usize, fractional: bool, rng: &mut R) -> f64 {
    if max == 0 {
        0.0
    } else if fractional {
        rng.gen_range(-(max as f64)..=max as f64)
    } else {
        rng.gen_range(-(max as i64)..=max as i64) as f64
    }
}

/// Apply one random shift to a map.
pub fn augment<R: Rng + ?Sized>(
    x: &DMatrix<f64>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    if cfg.is_identity() {
        return Ok(x.clone());
    }
    if x.shape() != (cfg.frames, cfg.bands) {
        return Err(PbnError::Config(format!(
            "map is {}x{}, augmentation expects {}x{}",
            x.nrows(),
            x.ncols(),
            cfg.frames,
            cfg.bands
        )));
    }
    let dt = draw_shift(cfg.time_shift, cfg.fractional, rng);
    let db = draw_shift(cfg.freq_shift, cfg.fractional, rng);
    Ok(if cfg.fractional {
        fractional_shift(x, dt, db)
    } else {
        circular_shift(x, dt as i64, db as i64)
    })
}

/// [`augment`] on a time-major flattened map.
pub fn augment_vector<R: Rng + ?Sized>(
    x: &DVector<f64>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if cfg.is_identity() {
        return Ok(x.clone());
    }
    if x.len() != cfg.frames * cfg.bands {
        return Err(PbnError::Config(format!(
            "input of length {} is not a {}x{} map",
            x.len(),
            cfg.frames,
            cfg.bands
        )));
    }
    let m = DMatrix::from_row_slice(cfg.frames, cfg.bands, x.as_slice());
    let out = augment(&m, cfg, rng)?;
    Ok(DVector::from_iterator(
        out.len(),
        out.transpose().iter().copied(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::OutputDensitySpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_net(seed: u64) -> NetworkModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l0 = init_layer(
            4,
            3,
            Family::Gaussian,
            Activation::Family(Family::TruncGaussian),
            &mut rng,
        )
        .unwrap();
        let mut l1 = init_layer(
            3,
            2,
            Family::TruncGaussian,
            Activation::Family(Family::TruncExponential),
            &mut rng,
        )
        .unwrap();
        l1.b = DVector::from_vec(vec![0.2, -0.1]);
        NetworkModel::new(vec![l0, l1], OutputDensitySpec::ted_indicator(0, 2, 1.0)).unwrap()
    }

    fn toy_batch(seed: u64, n: usize) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| Sample {
                x: DVector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal)),
                label: i % 2,
            })
            .collect()
    }

    #[test]
    fn config_checks() {
        let mut cfg = DaLossConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.ce_scale = -1.0;
        assert!(cfg.validate().is_err());
        cfg = DaLossConfig::default();
        cfg.optimizer.step = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn empty_batch() {
        let cfg = DaLossConfig::default();
        assert!(matches!(
            da_loss(&toy_net(1), &[], &cfg),
            Err(PbnError::EmptyBatch)
        ));
    }

    #[test]
    fn loss_decomposes() {
        let net = toy_net(2);
        let batch = toy_batch(3, 6);
        let mut cfg = DaLossConfig {
            ce_scale: 0.0,
            ..Default::default()
        };
        let l0 = da_loss(&net, &batch, &cfg).unwrap();
        let direct: f64 = batch
            .iter()
            .filter(|s| s.label == 0)
            .map(|s| -net.log_likelihood(&s.x).unwrap())
            .sum();
        assert!((l0.loss - direct).abs() < 1e-10);
        cfg.ce_scale = 7.0;
        let l1 = da_loss(&net, &batch, &cfg).unwrap();
        assert!((l1.loss - l0.nll - 7.0 * l1.ce).abs() < 1e-10);
        let others: Vec<Sample> = batch.iter().filter(|s| s.label == 1).cloned().collect();
        let l2 = da_loss(&net, &others, &cfg).unwrap();
        assert_eq!(l2.nll, 0.0);
        assert!((l2.loss - 7.0 * l2.ce).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_differences() {
        let net = toy_net(4);
        let batch = toy_batch(5, 6);
        for head in [Head::Softmax, Head::Binary] {
            let cfg = DaLossConfig {
                ce_scale: 3.0,
                head,
                ..Default::default()
            };
            for r in grad_check(&net, &batch, &cfg, 1e-5).unwrap() {
                assert!(
                    r.max_rel_error < 1e-4,
                    "{head:?} {}: {}",
                    r.name,
                    r.max_rel_error
                );
            }
        }
    }

    #[test]
    fn params_round_trip() {
        let mut net = toy_net(6);
        let p = get_params(&net);
        assert_eq!(p.len(), 4 * 3 + 3 + 3 * 2 + 2);
        let q: Vec<f64> = p.iter().map(|v| v + 1.0).collect();
        set_params(&mut net, &q).unwrap();
        assert_eq!(get_params(&net), q);
        assert!(set_params(&mut net, &q[1..]).is_err());
    }

    #[test]
    fn shifts() {
        let x = DMatrix::from_fn(5, 3, |i, j| (i * 3 + j) as f64);
        assert_eq!(circular_shift(&x, 0, 0), x);
        assert_eq!(circular_shift(&circular_shift(&x, 2, -1), -2, 1), x);
        assert_eq!(circular_shift(&x, 1, 0)[(1, 0)], x[(0, 0)]);
        let f = fractional_shift(&x, 1.0, 0.0);
        assert!((f - circular_shift(&x, 1, 0)).amax() < 1e-10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = AugmentConfig {
            frames: 5,
            bands: 3,
            time_shift: 2,
            freq_shift: 1,
            fractional: false,
        };
        let y = augment(&x, &cfg, &mut rng).unwrap();
        assert!((y.mean() - x.mean()).abs() == 0.0);
        let bad = AugmentConfig {
            time_shift: 9,
            ..cfg
        };
        assert!(augment(&x, &bad, &mut rng).is_err());
    }

    #[test]
    fn history_csv_header() {
        let h = History {
            epochs: vec![EpochRecord {
                epoch: 0,
                nll: 1.5,
                ce: 0.25,
                errors: 3,
                sampling_efficiency: 1.0,
            }],
            stopped_early: false,
        };
        assert_eq!(
            h.to_csv(),
            "epoch,nll,ce,errors,sampling_efficiency\n0,1.5,0.25,3,1\n"
        );
    }
}
