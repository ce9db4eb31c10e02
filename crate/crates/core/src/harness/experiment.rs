//! Config-driven runs: data, folds, per-class training, evaluation tables,
//! sweeps and a manifest of seeds and checksums.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::folds::{folds_from_csv, make_folds, DatasetEntry, FoldSpec};
use super::scores::{hash_line, ScoreTable};
use super::sweeps::{
    best_point, ensemble_sweep, factor_grid, self_combination_sweep, sweep_to_csv, Event,
    LikelihoodCache, SweepPoint,
};
use super::synthetic::{weak_table, SequenceConfig};
use super::{derive_seed, sha256_hex};
use crate::container::{load_model, save_model, ModelBundle, ModelMeta};
use crate::conv::Conv2d;
use crate::error::{PbnError, Result};
use crate::expfam::Family;
use crate::features::{extract, read_features, read_wav, FeatureConfig};
use crate::hmm::{pbn_da_hmm_score, train_hmm, FeatureSequence, HmmConfig, HmmModel};
use crate::layer::{Activation, LayerSpec};
use crate::network::{NetworkModel, OutputDensitySpec};
use crate::train::{init_layer, train_pbn_da, DaLossConfig, Head, History, Sample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSection {
    pub name: String,
    pub seed: u64,
    /// Worker threads; 1 runs everything on the calling thread, 0 uses
    /// every core.
    pub threads: usize,
    pub folds: usize,
    pub test_fraction: f64,
    /// Published split to import instead of drawing random folds.
    pub fold_file: Option<PathBuf>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            name: "experiment".into(),
            seed: 1,
            threads: 1,
            folds: 4,
            test_fraction: 0.25,
            fold_file: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Band-pattern sequences drawn from [`SequenceConfig`].
    Synthetic,
    /// Manifest rows pointing at feature containers.
    Features,
    /// Manifest rows pointing at WAV files, extracted on load.
    Wav,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub source: DataSource,
    /// CSV with columns `id,label,path`; paths are relative to it.
    pub manifest: Option<PathBuf>,
    /// Synthetic samples per class.
    pub per_class: usize,
    pub sequence: SequenceConfig,
    /// Extraction settings for `source = "wav"`.
    pub features: Option<FeatureConfig>,
    pub class_names: Vec<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            manifest: None,
            per_class: 40,
            sequence: SequenceConfig::default(),
            features: None,
            class_names: Vec::new(),
        }
    }
}

/// One network layer. The input family of every layer after the first is
/// implied by the activation before it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerConfig {
    Dense {
        outputs: usize,
        activation: String,
    },
    Conv {
        kernel_t: usize,
        kernel_f: usize,
        out_ch: usize,
        #[serde(default = "one")]
        stride_t: usize,
        #[serde(default = "one")]
        stride_f: usize,
        /// Zero padding per side.
        #[serde(default)]
        pad_t: usize,
        #[serde(default)]
        pad_f: usize,
        activation: String,
    },
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// Prior family of the raw input.
    pub input_family: String,
    pub layers: Vec<LayerConfig>,
    /// Depth of the HMM tap.
    pub tap: Option<usize>,
    /// Leading linear Gaussian layers evaluated as one map.
    pub gaussian_group: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_family: "gaussian".into(),
            layers: Vec::new(),
            tap: None,
            gaussian_group: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Indicator confidence of the reported PBN-DA scores.
    pub confidence: f64,
    /// Confidences of the self-combination sweep.
    pub c_grid: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            confidence: 1.0,
            c_grid: vec![1e-3, 0.1, 1.0, 10.0, 100.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    /// Third-party score table (`event_id,label,score_0..`) covering the
    /// test events.
    pub external: Option<PathBuf>,
    /// Class-score boost of the generated stand-in table used when no
    /// external table is given.
    pub weak_strength: f64,
    /// Explicit factors; when empty a log grid around `center` is used.
    pub factors: Vec<f64>,
    pub center: f64,
    pub decades: usize,
    pub per_decade: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            external: None,
            weak_strength: 1.0,
            factors: Vec::new(),
            center: 6000.0,
            decades: 2,
            per_decade: 4,
        }
    }
}

impl EnsembleConfig {
    pub fn grid(&self) -> Vec<f64> {
        if self.factors.is_empty() {
            factor_grid(self.center, self.decades, self.per_decade)
        } else {
            self.factors.clone()
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub data: DataConfig,
    pub network: NetworkConfig,
    pub train: DaLossConfig,
    /// PBN-DA-HMM tail; absent disables it.
    pub hmm: Option<HmmConfig>,
    pub eval: EvalConfig,
    pub ensemble: Option<EnsembleConfig>,
}

/// Shape of the features flowing between layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Map { time: usize, freq: usize, ch: usize },
    Flat(usize),
}

impl Shape {
    fn len(self) -> usize {
        match self {
            Shape::Map { time, freq, ch } => time * freq * ch,
            Shape::Flat(n) => n,
        }
    }
}

/// Checked layer plan of a network config.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerPlan {
    pub input: Family,
    pub activation: Activation,
    pub n_in: usize,
    pub n_out: usize,
    pub conv: Option<Conv2d>,
}

fn family(name: &str) -> Result<Family> {
    Family::from_name(name).ok_or_else(|| PbnError::Config(format!("unknown family '{name}'")))
}

fn activation(name: &str) -> Result<Activation> {
    Activation::from_name(name)
        .ok_or_else(|| PbnError::Config(format!("unknown activation '{name}'")))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        toml::from_str(text).map_err(|e| PbnError::Config(e.to_string()))
    }

    /// Read a config and resolve its relative paths against its directory.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| PbnError::io(path, e))?;
        let mut cfg = ExperimentConfig::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(p) = p.as_mut().filter(|p| p.is_relative()) {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.data.manifest);
        resolve(&mut cfg.experiment.fold_file);
        if let Some(e) = cfg.ensemble.as_mut() {
            resolve(&mut e.external);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.folds == 0 && e.fold_file.is_none() {
            return Err(PbnError::Config("experiment.folds must be >= 1".into()));
        }
        if !(e.test_fraction > 0.0 && e.test_fraction < 1.0) {
            return Err(PbnError::Config(
                "experiment.test_fraction must lie in (0, 1)".into(),
            ));
        }
        match self.data.source {
            DataSource::Synthetic => self.data.sequence.validate()?,
            DataSource::Features | DataSource::Wav if self.data.manifest.is_none() => {
                return Err(PbnError::Config(
                    "data.manifest is required for file data".into(),
                ))
            }
            DataSource::Wav if self.data.features.is_none() => {
                return Err(PbnError::Config(
                    "data.features is required for wav data".into(),
                ))
            }
            _ => {}
        }
        if let Some(f) = &self.data.features {
            f.validate()?;
        }
        // an unset augmentation shape is taken from the data
        let mut tc = self.train.clone();
        if tc.augmentation.frames == 0 && tc.augmentation.bands == 0 {
            tc.augmentation.frames = usize::MAX;
            tc.augmentation.bands = usize::MAX;
        }
        tc.validate()?;
        if let Some(h) = &self.hmm {
            h.validate()?;
            if self.network.tap.is_none() {
                return Err(PbnError::Config("the HMM tail needs network.tap".into()));
            }
        }
        if self.network.layers.is_empty() {
            return Err(PbnError::Config("network.layers is empty".into()));
        }
        if !(self.eval.confidence > 0.0) || self.eval.c_grid.iter().any(|c| !(*c > 0.0)) {
            return Err(PbnError::Config("indicator confidences must be > 0".into()));
        }
        if let Some(en) = &self.ensemble {
            if en.grid().iter().any(|f| !(*f >= 0.0) || !f.is_finite()) {
                return Err(PbnError::Config(
                    "ensemble factors must be finite and >= 0".into(),
                ));
            }
        }
        Ok(())
    }

    /// Layer dimensions for `frames x bands` inputs and `k` classes, plus
    /// the HMM frame dimension at the tap.
    /// Training settings for `frames x bands` maps.
    pub fn train_config(&self, frames: usize, bands: usize) -> DaLossConfig {
        let mut tc = self.train.clone();
        if tc.augmentation.frames == 0 && tc.augmentation.bands == 0 {
            tc.augmentation.frames = frames;
            tc.augmentation.bands = bands;
        }
        tc
    }

    pub fn plan(
        &self,
        frames: usize,
        bands: usize,
        k: usize,
    ) -> Result<(Vec<LayerPlan>, Option<usize>)> {
        let mut shape = Shape::Map {
            time: frames,
            freq: bands,
            ch: 1,
        };
        let mut input = family(&self.network.input_family)?;
        let mut layers = Vec::new();
        let mut tap_dim = None;
        let tap = self.network.tap;
        for (depth, lc) in self.network.layers.iter().enumerate() {
            if tap == Some(depth) {
                tap_dim = Some(frame_dim(shape, depth)?);
            }
            let (act, n_out, conv, next) = match lc {
                LayerConfig::Dense {
                    outputs,
                    activation: a,
                } => (activation(a)?, *outputs, None, Shape::Flat(*outputs)),
                LayerConfig::Conv {
                    kernel_t,
                    kernel_f,
                    out_ch,
                    stride_t,
                    stride_f,
                    pad_t,
                    pad_f,
                    activation: a,
                } => {
                    let Shape::Map { time, freq, ch } = shape else {
                        return Err(PbnError::Config(format!(
                            "layer {depth}: a conv layer needs a map input"
                        )));
                    };
                    let g = Conv2d {
                        in_time: time,
                        in_freq: freq,
                        in_ch: ch,
                        out_ch: *out_ch,
                        kernel_t: *kernel_t,
                        kernel_f: *kernel_f,
                        stride_t: *stride_t,
                        stride_f: *stride_f,
                        pad_t: *pad_t,
                        pad_f: *pad_f,
                    };
                    g.validate()
                        .map_err(|e| PbnError::Config(format!("layer {depth}: {e}")))?;
                    let next = Shape::Map {
                        time: g.out_time(),
                        freq: g.out_freq(),
                        ch: g.out_ch,
                    };
                    (activation(a)?, g.n_out(), Some(g), next)
                }
            };
            if n_out == 0 || n_out > shape.len() {
                return Err(PbnError::Config(format!(
                    "layer {depth} maps {} inputs to {n_out} outputs; it must reduce dimension",
                    shape.len()
                )));
            }
            layers.push(LayerPlan {
                input,
                activation: act,
                n_in: shape.len(),
                n_out,
                conv,
            });
            input = act.downstream_family();
            shape = next;
        }
        if tap == Some(layers.len()) {
            return Err(PbnError::Config(
                "the tap must lie before the last layer".into(),
            ));
        }
        if let Some(t) = tap {
            if t > layers.len() {
                return Err(PbnError::Config(format!(
                    "tap {t} beyond {} layers",
                    layers.len()
                )));
            }
        }
        let last = layers.last().expect("layers checked nonempty");
        let want = if self.train.head == Head::Binary {
            1
        } else {
            k
        };
        if last.n_out != want {
            return Err(PbnError::Config(format!(
                "the last layer has {} outputs; the {:?} head over {k} classes needs {want}",
                last.n_out, self.train.head
            )));
        }
        if last.activation != Activation::Family(Family::TruncExponential) {
            return Err(PbnError::Config(
                "the last layer needs a trunc-exponential activation".into(),
            ));
        }
        Ok((layers, tap_dim))
    }
}

fn frame_dim(shape: Shape, depth: usize) -> Result<usize> {
    match shape {
        Shape::Map { freq, ch, .. } => Ok(freq * ch),
        Shape::Flat(_) => Err(PbnError::Config(format!(
            "tap {depth} follows a dense layer; it needs a time-frequency map"
        ))),
    }
}

/// Loaded dataset: flattened time-major maps.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub samples: Vec<Sample>,
    pub frames: usize,
    pub bands: usize,
}

impl Dataset {
    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.samples.iter().map(|s| s.label + 1).max().unwrap_or(0)
    }
}

fn read_entries(cfg: &ExperimentConfig) -> Result<Vec<DatasetEntry>> {
    let path = cfg.data.manifest.as_ref().expect("validated");
    super::folds::read_manifest(path)
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    if cfg.data.source == DataSource::Synthetic {
        let seq = &cfg.data.sequence;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.experiment.seed, &[u64::MAX]));
        let samples = seq.sample(cfg.data.per_class, &mut rng)?;
        return Ok(Dataset {
            ids: (0..samples.len()).map(|i| format!("ev{i:04}")).collect(),
            samples,
            frames: seq.frames,
            bands: seq.bands,
        });
    }
    let entries = read_entries(cfg)?;
    let base = cfg
        .data
        .manifest
        .as_ref()
        .and_then(|p| p.parent())
        .unwrap_or(Path::new("."));
    let mut samples = Vec::with_capacity(entries.len());
    let mut shape = None;
    for e in &entries {
        let rel = e
            .path
            .as_ref()
            .ok_or_else(|| PbnError::Config(format!("manifest row '{}' has no path", e.id)))?;
        let path = base.join(rel);
        let values: DMatrix<f64> = match cfg.data.source {
            DataSource::Features => {
                let mut maps = read_features(&path)?;
                if maps.is_empty() {
                    return Err(PbnError::Config(format!(
                        "{} holds no feature maps",
                        path.display()
                    )));
                }
                maps.swap_remove(0).values
            }
            _ => {
                let fc = cfg.data.features.as_ref().expect("validated");
                let (wave, rate) = read_wav(&path)?;
                if rate != fc.sample_rate {
                    return Err(PbnError::Config(format!(
                        "{} is sampled at {rate} Hz, features expect {} Hz",
                        path.display(),
                        fc.sample_rate
                    )));
                }
                extract(fc, &wave, &e.id)?.values
            }
        };
        let s = values.shape();
        if *shape.get_or_insert(s) != s {
            return Err(PbnError::Dimension(format!(
                "{}: map is {}x{}, expected {:?}",
                e.id, s.0, s.1, shape
            )));
        }
        samples.push(Sample {
            x: nalgebra::DVector::from_iterator(values.len(), values.transpose().iter().copied()),
            label: e.label,
        });
    }
    let (frames, bands) = shape.ok_or(PbnError::EmptyBatch)?;
    Ok(Dataset {
        ids: entries.into_iter().map(|e| e.id).collect(),
        samples,
        frames,
        bands,
    })
}

fn build_network(
    plan: &[LayerPlan],
    cfg: &ExperimentConfig,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<NetworkModel> {
    let layers = plan
        .iter()
        .map(|p| match p.conv {
            Some(g) => {
                let fan_in = g.kernel_t * g.kernel_f * g.in_ch;
                let normal =
                    Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive scale");
                let kernel: Vec<f64> = (0..g.kernel_len()).map(|_| normal.sample(rng)).collect();
                LayerSpec::convolutional(g, &kernel, &vec![0.0; g.out_ch], p.input, p.activation)
            }
            None => init_layer(p.n_in, p.n_out, p.input, p.activation, rng),
        })
        .collect::<Result<Vec<_>>>()?;
    let n_out = plan.last().expect("nonempty plan").n_out;
    let unit = if n_out == 1 { 0 } else { m };
    let mut net = NetworkModel::new(
        layers,
        OutputDensitySpec::ted_indicator(unit, n_out, cfg.eval.confidence),
    )?;
    if cfg.network.gaussian_group > 0 {
        net = net.with_gaussian_group(cfg.network.gaussian_group)?;
    }
    if let Some(t) = cfg.network.tap {
        net = net.with_tap(t)?;
    }
    Ok(net)
}

/// Trained model of one class in one fold.
#[derive(Clone, Debug)]
pub struct ClassModel {
    pub network: NetworkModel,
    pub hmm: Option<HmmModel>,
    pub history: History,
    pub diverged: bool,
}

fn tapped_sequences(
    net: &NetworkModel,
    samples: &[&Sample],
    dim: usize,
) -> Result<Vec<FeatureSequence>> {
    let tap = net.tap.expect("validated");
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        match net.likelihood_to_depth(&s.x, tap) {
            Ok((_, h)) => out.push(FeatureSequence::from_time_major(&h, dim)?),
            Err(e) if e.is_sampling_failure() => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

fn train_class(
    cfg: &ExperimentConfig,
    plan: &[LayerPlan],
    tap_dim: Option<usize>,
    data: &Dataset,
    train: &[Sample],
    m: usize,
    seed: u64,
) -> Result<ClassModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut network = build_network(plan, cfg, m, &mut rng).map_err(|e| e.at_stage("train"))?;
    let mut tc = cfg.train_config(data.frames, data.bands);
    tc.class_index = m;
    let (history, diverged) = match train_pbn_da(&mut network, train, &tc, &mut rng) {
        Ok(h) => (h, false),
        // parameters were restored to the last good step; keep them
        Err(PbnError::TrainingDiverged { .. }) => (History::default(), true),
        Err(e) => return Err(e.at_stage("train")),
    };
    network.output = network.output.with_confidence(cfg.eval.confidence);
    let hmm = match (&cfg.hmm, tap_dim) {
        (Some(hc), Some(dim)) => {
            let own: Vec<&Sample> = train.iter().filter(|s| s.label == m).collect();
            let seqs = tapped_sequences(&network, &own, dim).map_err(|e| e.at_stage("hmm"))?;
            Some(
                train_hmm(&seqs, hc, &mut rng)
                    .map_err(|e| e.at_stage("hmm"))?
                    .0,
            )
        }
        _ => None,
    };
    Ok(ClassModel {
        network,
        hmm,
        history,
        diverged,
    })
}

/// Error counts of one fold.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub name: String,
    pub seed: u64,
    pub test_events: usize,
    pub pbn_da_errors: usize,
    pub pbn_da_hmm_errors: Option<usize>,
    pub external_errors: Option<usize>,
    pub best_confidence: Option<SweepPoint>,
    pub best_factor: Option<SweepPoint>,
    /// Classes whose training stopped on divergence.
    pub diverged: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub config_hash: String,
    pub plan: String,
    pub folds: Vec<FoldResult>,
}

impl RunSummary {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<usize>| v.map_or(String::new(), |v| v.to_string());
        let point = |p: Option<SweepPoint>| {
            p.map_or(",".to_string(), |p| format!("{},{}", p.value, p.errors))
        };
        let mut s = hash_line(Some(&self.config_hash));
        s.push_str("fold,test_events,pbn_da_errors,pbn_da_hmm_errors,external_errors,best_confidence,best_confidence_errors,best_factor,best_factor_errors\n");
        for f in &self.folds {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                f.name,
                f.test_events,
                f.pbn_da_errors,
                opt(f.pbn_da_hmm_errors),
                opt(f.external_errors),
                point(f.best_confidence),
                point(f.best_factor)
            );
        }
        s
    }
}

fn class_seed(seed: u64, fold: usize, class: usize) -> u64 {
    derive_seed(seed, &[fold as u64, class as u64])
}

fn resolve_folds(cfg: &ExperimentConfig, data: &Dataset) -> Result<Vec<FoldSpec>> {
    match &cfg.experiment.fold_file {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| PbnError::io(path, e))?;
            let entries: Vec<DatasetEntry> = data
                .ids
                .iter()
                .zip(&data.samples)
                .map(|(id, s)| DatasetEntry {
                    id: id.clone(),
                    label: s.label,
                    path: None,
                })
                .collect();
            folds_from_csv(&text, &entries)
        }
        None => make_folds(
            &data.labels(),
            cfg.experiment.folds,
            cfg.experiment.seed,
            cfg.experiment.test_fraction,
        ),
    }
}

/// A validated config with its data, folds and layer plan: everything a
/// stage needs before any training.
pub struct Prepared {
    pub cfg: ExperimentConfig,
    pub hash: String,
    pub data: Dataset,
    pub folds: Vec<FoldSpec>,
    pub plan_text: String,
    plan: Vec<LayerPlan>,
    tap_dim: Option<usize>,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate().map_err(|e| e.at_stage("config"))?;
    let data = load_dataset(cfg).map_err(|e| e.at_stage("data"))?;
    let folds = resolve_folds(cfg, &data).map_err(|e| e.at_stage("folds"))?;
    let (plan, tap_dim) = cfg
        .plan(data.frames, data.bands, data.num_classes())
        .map_err(|e| e.at_stage("config"))?;
    cfg.train_config(data.frames, data.bands)
        .validate()
        .map_err(|e| e.at_stage("config"))?;
    let hash = cfg.hash();
    let mut p = Prepared {
        cfg: cfg.clone(),
        hash,
        data,
        folds,
        plan_text: String::new(),
        plan,
        tap_dim,
    };
    p.plan_text = p.describe();
    Ok(p)
}

/// Scores of one fold's test events.
pub struct FoldScores {
    pub cache: LikelihoodCache,
    pub pbn_da: ScoreTable,
    pub pbn_da_hmm: Option<ScoreTable>,
}

impl Prepared {
    pub fn num_classes(&self) -> usize {
        self.data.num_classes()
    }

    pub fn fold_index(&self, name: &str) -> Result<usize> {
        self.folds
            .iter()
            .position(|f| f.name == name)
            .ok_or_else(|| PbnError::Config(format!("no fold named '{name}'")))
    }

    pub fn class_seeds(&self, fold: usize) -> Vec<u64> {
        (0..self.num_classes())
            .map(|m| class_seed(self.cfg.experiment.seed, fold, m))
            .collect()
    }

    fn parallel(&self) -> bool {
        self.cfg.experiment.threads != 1
    }

    fn describe(&self) -> String {
        let k = self.num_classes();
        let mut s = String::new();
        let _ = writeln!(
            s,
            "experiment {} (config {})",
            self.cfg.experiment.name, self.hash
        );
        let _ = writeln!(
            s,
            "data: {} events, {k} classes, {}x{} maps",
            self.data.samples.len(),
            self.data.frames,
            self.data.bands
        );
        for (i, p) in self.plan.iter().enumerate() {
            let _ = writeln!(
                s,
                "layer {i}: {} -> {} {} -> {}{}",
                p.n_in,
                p.n_out,
                p.input.name(),
                p.activation.name(),
                if p.conv.is_some() { " (conv)" } else { "" }
            );
        }
        for f in &self.folds {
            let tr: Vec<usize> = f.train.iter().map(|v| v.len()).collect();
            let te: Vec<usize> = f.test.iter().map(|v| v.len()).collect();
            let _ = writeln!(s, "fold {}: train {tr:?} test {te:?}", f.name);
        }
        let mut stages = vec!["train"];
        if self.cfg.hmm.is_some() {
            stages.push("hmm");
        }
        stages.extend(["eval", "sweep-self-combination"]);
        if self.cfg.ensemble.is_some() {
            stages.push("sweep-ensemble");
        }
        let _ = writeln!(s, "stages per fold: {}", stages.join(", "));
        let _ = writeln!(s, "class models per fold: {k}");
        s
    }

    /// Train every class model of fold `fi`. Classes run as independent
    /// jobs when the config allows more than one thread.
    pub fn train_fold(&self, fi: usize) -> Result<Vec<ClassModel>> {
        let train: Vec<Sample> = self.folds[fi]
            .train_indices()
            .iter()
            .map(|&i| self.data.samples[i].clone())
            .collect();
        let seeds = self.class_seeds(fi);
        let job = |m: usize| {
            train_class(
                &self.cfg,
                &self.plan,
                self.tap_dim,
                &self.data,
                &train,
                m,
                seeds[m],
            )
        };
        thread_pool(self.cfg.experiment.threads)?.install(|| {
            if self.parallel() {
                (0..self.num_classes()).into_par_iter().map(job).collect()
            } else {
                (0..self.num_classes()).map(job).collect()
            }
        })
    }

    pub fn test_events(&self, fi: usize) -> Vec<Event> {
        self.folds[fi]
            .test_indices()
            .iter()
            .map(|&i| Event {
                id: self.data.ids[i].clone(),
                label: self.data.samples[i].label,
                x: self.data.samples[i].x.clone(),
            })
            .collect()
    }

    /// PBN-DA scores at the configured confidence and, when every model
    /// has an HMM tail, PBN-DA-HMM scores.
    pub fn score_fold(&self, fi: usize, models: &[ModelBundle]) -> Result<FoldScores> {
        let events = self.test_events(fi);
        let k = self.num_classes();
        if models.len() != k {
            return Err(PbnError::Config(format!(
                "{} models for {k} classes",
                models.len()
            )));
        }
        let parallel = self.parallel();
        let pool = thread_pool(self.cfg.experiment.threads)?;
        let nets: Vec<NetworkModel> = models.iter().map(|m| m.network.clone()).collect();
        let cache = pool.install(|| LikelihoodCache::build(&nets, &events, parallel))?;
        let pbn_da = cache.scores_at(self.cfg.eval.confidence)?;
        let pbn_da_hmm = if models.iter().all(|m| m.hmm.is_some()) && self.cfg.hmm.is_some() {
            let pairs: Vec<(NetworkModel, HmmModel)> = models
                .iter()
                .map(|m| (m.network.clone(), m.hmm.clone().expect("checked")))
                .collect();
            let rows = pool.install(|| {
                let score = |e: &Event| pbn_da_hmm_score(&pairs, &e.x);
                if parallel {
                    events.par_iter().map(score).collect::<Result<Vec<_>>>()
                } else {
                    events.iter().map(score).collect::<Result<Vec<_>>>()
                }
            })?;
            let flat: Vec<f64> = rows.into_iter().flatten().collect();
            Some(ScoreTable::new(
                cache.event_ids.clone(),
                cache.labels.clone(),
                DMatrix::from_row_slice(events.len(), k, &flat),
                "pbn-da-hmm",
            )?)
        } else {
            None
        };
        Ok(FoldScores {
            cache,
            pbn_da,
            pbn_da_hmm,
        })
    }

    /// The external table for fold `fi`: the configured file restricted to
    /// the test events, or a generated weak table.
    pub fn external_table(&self, fi: usize, cache: &LikelihoodCache) -> Result<Option<ScoreTable>> {
        let Some(en) = &self.cfg.ensemble else {
            return Ok(None);
        };
        let t = match &en.external {
            Some(p) => ScoreTable::read_csv(p, "external")?.aligned_to(&cache.event_ids)?,
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                    self.cfg.experiment.seed,
                    &[fi as u64, u64::MAX],
                ));
                weak_table(
                    &cache.event_ids,
                    &cache.labels,
                    self.num_classes(),
                    en.weak_strength,
                    &mut rng,
                )?
            }
        };
        Ok(Some(t))
    }
}

/// Relative path of a class model inside a run directory.
pub fn model_path(fold: &str, class: usize) -> String {
    format!("fold_{fold}/class_{class}.pbn")
}

pub fn load_fold_models(dir: &Path, fold: &str, k: usize) -> Result<Vec<ModelBundle>> {
    (0..k)
        .map(|m| load_model(&dir.join(model_path(fold, m))))
        .collect()
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| PbnError::Config(format!("thread pool: {e}")))
}

/// Collects artifact writes of a run; every write goes through the
/// calling thread.
pub struct Artifacts<'a> {
    root: &'a Path,
    hash: &'a str,
    written: Vec<(String, String)>,
}

impl<'a> Artifacts<'a> {
    pub fn new(root: &'a Path, hash: &'a str) -> Self {
        Artifacts {
            root,
            hash,
            written: Vec::new(),
        }
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| PbnError::io(dir, e))?;
        }
        fs::write(&path, bytes).map_err(|e| PbnError::io(&path, e))?;
        self.written.push((rel.to_string(), sha256_hex(bytes)));
        Ok(())
    }

    pub fn save_models(
        &mut self,
        fold: &str,
        models: &[ClassModel],
        class_names: &[String],
    ) -> Result<()> {
        for (m, cm) in models.iter().enumerate() {
            let bundle = ModelBundle {
                network: cm.network.clone(),
                hmm: cm.hmm.clone(),
            };
            let name = class_names
                .get(m)
                .cloned()
                .unwrap_or_else(|| format!("class{m}"));
            let rel = model_path(fold, m);
            let path = self.root.join(&rel);
            fs::create_dir_all(path.parent().expect("model path has a parent"))
                .map_err(|e| PbnError::io(&path, e))?;
            save_model(
                &path,
                &bundle,
                &ModelMeta::describe(&bundle, m, &name, self.hash),
            )?;
            for r in [rel.clone(), rel.replace(".pbn", ".toml")] {
                let p = self.root.join(&r);
                let bytes = fs::read(&p).map_err(|e| PbnError::io(&p, e))?;
                self.written.push((r, sha256_hex(&bytes)));
            }
            let hist = format!("{}{}", hash_line(Some(self.hash)), cm.history.to_csv());
            self.write(
                &format!("fold_{fold}/history_class_{m}.csv"),
                hist.as_bytes(),
            )?;
        }
        Ok(())
    }

    pub fn table(&mut self, fold: &str, name: &str, t: &ScoreTable) -> Result<usize> {
        let ev = t.evaluate();
        self.write(
            &format!("fold_{fold}/scores_{name}.csv"),
            t.to_csv(Some(self.hash)).as_bytes(),
        )?;
        self.write(
            &format!("fold_{fold}/confusion_{name}.csv"),
            ev.to_csv(Some(self.hash)).as_bytes(),
        )?;
        Ok(ev.errors)
    }

    pub fn sweep(
        &mut self,
        fold: &str,
        name: &str,
        column: &str,
        points: &[SweepPoint],
    ) -> Result<()> {
        self.write(
            &format!("fold_{fold}/sweep_{name}.csv"),
            sweep_to_csv(points, column, Some(self.hash)).as_bytes(),
        )
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    name: &'a str,
    config_hash: &'a str,
    version: &'a str,
    seed: u64,
    threads: usize,
    folds: Vec<ManifestFold<'a>>,
    artifacts: Vec<ManifestArtifact<'a>>,
}

/// Derived seeds span all of u64, beyond TOML integers, so they are
/// written as hex.
#[derive(Serialize)]
struct ManifestFold<'a> {
    name: &'a str,
    seed: String,
    class_seeds: Vec<String>,
}

#[derive(Serialize)]
struct ManifestArtifact<'a> {
    path: &'a str,
    sha256: &'a str,
}

/// Run an experiment into `out_dir`. With `dry_run`, validate the config,
/// load the data and draw the folds, then return the plan without training
/// or writing anything.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path, dry_run: bool) -> Result<RunSummary> {
    let prep = prepare(cfg)?;
    if dry_run {
        return Ok(RunSummary {
            config_hash: prep.hash.clone(),
            plan: prep.plan_text.clone(),
            folds: Vec::new(),
        });
    }
    let hash = prep.hash.clone();
    let mut art = Artifacts::new(out_dir, &hash);
    let w = |e: PbnError| e.at_stage("write");
    let config_text = hash_line(Some(&hash)) + &cfg.to_toml();
    art.write("config.toml", config_text.as_bytes())
        .map_err(w)?;
    let mut results = Vec::with_capacity(prep.folds.len());
    for (fi, fold) in prep.folds.iter().enumerate() {
        let name = fold.name.as_str();
        let models = prep.train_fold(fi)?;
        art.save_models(name, &models, &cfg.data.class_names)
            .map_err(w)?;
        let bundles: Vec<ModelBundle> = models
            .iter()
            .map(|m| ModelBundle {
                network: m.network.clone(),
                hmm: m.hmm.clone(),
            })
            .collect();
        let scores = prep
            .score_fold(fi, &bundles)
            .map_err(|e| e.at_stage("eval"))?;
        let pbn_da_errors = art.table(name, "pbn-da", &scores.pbn_da).map_err(w)?;
        let pbn_da_hmm_errors = match &scores.pbn_da_hmm {
            Some(t) => Some(art.table(name, "pbn-da-hmm", t).map_err(w)?),
            None => None,
        };
        let c_sweep = self_combination_sweep(&scores.cache, &cfg.eval.c_grid)
            .map_err(|e| e.at_stage("sweep-self-combination"))?;
        art.sweep(name, "self_combination", "confidence", &c_sweep)
            .map_err(w)?;
        let external = prep
            .external_table(fi, &scores.cache)
            .map_err(|e| e.at_stage("sweep-ensemble"))?;
        let (external_errors, best_factor) = match (&external, &cfg.ensemble) {
            (Some(ext), Some(en)) => {
                let base = scores.pbn_da_hmm.as_ref().unwrap_or(&scores.pbn_da);
                let sweep = ensemble_sweep(base, ext, &en.grid())
                    .map_err(|e| e.at_stage("sweep-ensemble"))?;
                let errors = art.table(name, "external", ext).map_err(w)?;
                art.sweep(name, "ensemble", "factor", &sweep).map_err(w)?;
                (Some(errors), best_point(&sweep))
            }
            _ => (None, None),
        };
        results.push(FoldResult {
            name: fold.name.clone(),
            seed: fold.seed,
            test_events: scores.pbn_da.num_events(),
            pbn_da_errors,
            pbn_da_hmm_errors,
            external_errors,
            best_confidence: best_point(&c_sweep),
            best_factor,
            diverged: models
                .iter()
                .enumerate()
                .filter(|(_, m)| m.diverged)
                .map(|(i, _)| i)
                .collect(),
        });
    }
    let summary = RunSummary {
        config_hash: hash.clone(),
        plan: prep.plan_text.clone(),
        folds: results,
    };
    art.write("plan.txt", summary.plan.as_bytes()).map_err(w)?;
    art.write("summary.csv", summary.to_csv().as_bytes())
        .map_err(w)?;
    let manifest = Manifest {
        name: &cfg.experiment.name,
        config_hash: &hash,
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.experiment.seed,
        threads: cfg.experiment.threads,
        folds: prep
            .folds
            .iter()
            .enumerate()
            .map(|(fi, f)| ManifestFold {
                name: &f.name,
                seed: format!("{:016x}", f.seed),
                class_seeds: prep
                    .class_seeds(fi)
                    .iter()
                    .map(|v| format!("{v:016x}"))
                    .collect(),
            })
            .collect(),
        artifacts: art
            .written
            .iter()
            .map(|(path, sha256)| ManifestArtifact { path, sha256 })
            .collect(),
    };
    let text =
        toml::to_string(&manifest).map_err(|e| PbnError::Config(format!("manifest: {e}")))?;
    let path = out_dir.join("manifest.toml");
    fs::write(&path, text).map_err(|e| w(PbnError::io(&path, e)))?;
    Ok(summary)
}
