use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum PbnError {
    #[error("value {value} lies outside the {domain} domain")]
    Domain { value: f64, domain: &'static str },

    #[error("inadmissible natural parameter {alpha} for {family}")]
    Parameter { alpha: f64, family: &'static str },

    #[error("value {value} is outside the image of the {family} activation")]
    Range { value: f64, family: &'static str },

    /// The saddle-point equation has no solution (or the solver gave up).
    #[error("sampling failure{}: residual {residual:.3e} after {iterations} iterations", layer_suffix(.layer))]
    SamplingFailure {
        layer: Option<usize>,
        residual: f64,
        iterations: usize,
    },

    #[error("exact Gaussian manifold sampling requires a Gaussian prior")]
    Mode,

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("waveform too short: {len} samples, need at least {needed}")]
    TooShort { len: usize, needed: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("every candidate failed the saddle-point solve")]
    AllFailed,

    #[error("no class produced a finite score")]
    Classification,

    #[error("cached likelihood components missing for event {0}")]
    CacheMiss(String),

    #[error("score tables are not aligned: {0}")]
    Alignment(String),

    #[error("class {class} has {count} samples; at least {needed} are required")]
    TooFewSamples {
        class: usize,
        count: usize,
        needed: usize,
    },

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<PbnError>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn layer_suffix(layer: &Option<usize>) -> String {
    match layer {
        Some(l) => format!(" in layer {l}"),
        None => String::new(),
    }
}

impl PbnError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PbnError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(offset: u64, message: impl Into<String>) -> Self {
        PbnError::Format {
            offset,
            message: message.into(),
        }
    }

    /// Tag an error with the pipeline stage that produced it.
    pub fn at_stage(self, stage: &'static str) -> Self {
        PbnError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    pub fn is_sampling_failure(&self) -> bool {
        matches!(self, PbnError::SamplingFailure { .. })
    }

    /// Attach a layer index to a sampling failure.
    pub(crate) fn in_layer(self, index: usize) -> Self {
        match self {
            PbnError::SamplingFailure {
                residual,
                iterations,
                ..
            } => PbnError::SamplingFailure {
                layer: Some(index),
                residual,
                iterations,
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, PbnError>;
