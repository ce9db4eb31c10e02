//! Log band-energy feature maps: framing, Hanning-windowed power spectra,
//! MEL or linear band matrices, WAV ingestion and feature file I/O.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{PbnError, Result};

const FEATURE_MAGIC: &[u8; 4] = b"PBNF";
const FEATURE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandSpacing {
    Mel,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hanning,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub fft_size: usize,
    pub shift: usize,
    pub band_count: usize,
    pub band_spacing: BandSpacing,
    pub window: WindowKind,
    pub sample_rate: f64,
    /// Floor relative to the largest band energy of the map.
    pub log_floor: f64,
}

impl FeatureConfig {
    /// 768-point frames, 256 shift, 48 MEL bands.
    pub fn exp1(sample_rate: f64) -> Self {
        FeatureConfig {
            fft_size: 768,
            shift: 256,
            band_count: 48,
            band_spacing: BandSpacing::Mel,
            window: WindowKind::Hanning,
            sample_rate,
            log_floor: 1e-12,
        }
    }

    /// 384-point frames, 128 shift, 40 linear Hanning-weighted bands.
    pub fn exp2(sample_rate: f64) -> Self {
        FeatureConfig {
            fft_size: 384,
            shift: 128,
            band_count: 40,
            band_spacing: BandSpacing::Linear,
            window: WindowKind::Hanning,
            sample_rate,
            log_floor: 1e-12,
        }
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.fft_size < 4 || self.shift == 0 || self.shift > self.fft_size {
            return Err(PbnError::Config(format!(
                "need 0 < shift <= fft_size (got shift {} and fft size {})",
                self.shift, self.fft_size
            )));
        }
        if self.band_count == 0 || self.band_count > self.fft_size / 2 {
            return Err(PbnError::Config(format!(
                "band count {} must be between 1 and fft_size / 2",
                self.band_count
            )));
        }
        if !(self.sample_rate > 0.0) || !(self.log_floor > 0.0) {
            return Err(PbnError::Config(
                "sample rate and log floor must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// A time x band matrix of log band energies.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub values: DMatrix<f64>,
    pub config: FeatureConfig,
    pub source: String,
}

impl FeatureMap {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn bands(&self) -> usize {
        self.values.ncols()
    }

    /// Time-major flattening: element `(t, b)` goes to `t * bands + b`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.values.len());
        for row in self.values.row_iter() {
            out.extend(row.iter());
        }
        out
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Number of frames for a waveform of `len` samples.
pub fn frame_count(len: usize, shift: usize) -> usize {
    ((len as f64 / shift as f64).round() as usize).max(1)
}

/// Center frequency (Hz) of every band.
pub fn band_centers(config: &FeatureConfig) -> Result<Vec<f64>> {
    config.validate()?;
    let nyquist = config.sample_rate / 2.0;
    let n = config.band_count;
    Ok(match config.band_spacing {
        BandSpacing::Mel => {
            let top = hz_to_mel(nyquist);
            (1..=n)
                .map(|j| mel_to_hz(top * j as f64 / (n + 1) as f64))
                .collect()
        }
        BandSpacing::Linear => (1..=n)
            .map(|j| nyquist * j as f64 / (n + 1) as f64)
            .collect(),
    })
}

/// Bands x bins weight matrix applied to a power spectrum.
pub fn band_matrix(config: &FeatureConfig) -> Result<DMatrix<f64>> {
    config.validate()?;
    let bins = config.bins();
    let bin_hz = config.sample_rate / config.fft_size as f64;
    let nyquist = config.sample_rate / 2.0;
    let n = config.band_count;
    let mut m = DMatrix::zeros(n, bins);
    match config.band_spacing {
        BandSpacing::Mel => {
            let top = hz_to_mel(nyquist);
            let edges: Vec<f64> = (0..n + 2)
                .map(|j| mel_to_hz(top * j as f64 / (n + 1) as f64))
                .collect();
            for j in 0..n {
                let (lo, c, hi) = (edges[j], edges[j + 1], edges[j + 2]);
                for k in 0..bins {
                    let f = k as f64 * bin_hz;
                    let w = if f > lo && f <= c {
                        (f - lo) / (c - lo)
                    } else if f > c && f < hi {
                        (hi - f) / (hi - c)
                    } else {
                        0.0
                    };
                    m[(j, k)] = w;
                }
                if m.row(j).sum() <= 0.0 {
                    let k = ((c / bin_hz).round() as usize).min(bins - 1);
                    m[(j, k)] = 1.0;
                }
                // unit area
                let s = m.row(j).sum();
                m.row_mut(j).scale_mut(1.0 / s);
            }
        }
        BandSpacing::Linear => {
            // Hann bumps of width 2 * step centred every `step` bins.
            let step = (bins - 1) as f64 / (n + 1) as f64;
            for j in 0..n {
                let lo = j as f64 * step;
                for k in 0..bins {
                    let t = (k as f64 - lo) / (2.0 * step);
                    if t > 0.0 && t < 1.0 {
                        m[(j, k)] = 0.5 - 0.5 * (2.0 * PI * t).cos();
                    }
                }
                if m.row(j).sum() <= 0.0 {
                    let k = ((lo + step).round() as usize).min(bins - 1);
                    m[(j, k)] = 1.0;
                }
            }
        }
    }
    Ok(m)
}

fn window(config: &FeatureConfig) -> Vec<f64> {
    let n = config.fft_size;
    match config.window {
        WindowKind::Hanning => (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
            .collect(),
    }
}

/// Log band energies of `waveform`, one row per frame.
pub fn extract(config: &FeatureConfig, waveform: &[f64], source: &str) -> Result<FeatureMap> {
    config.validate()?;
    if waveform.len() < config.fft_size {
        return Err(PbnError::TooShort {
            len: waveform.len(),
            needed: config.fft_size,
        });
    }
    if waveform.iter().any(|v| !v.is_finite()) {
        return Err(PbnError::Config(
            "waveform contains non-finite samples".into(),
        ));
    }
    let bands = band_matrix(config)?;
    let win = window(config);
    let n = config.fft_size;
    let frames = frame_count(waveform.len(), config.shift);
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut energies = DMatrix::zeros(frames, config.band_count);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut power = nalgebra::DVector::zeros(config.bins());
    for t in 0..frames {
        let start = t * config.shift;
        for (i, c) in buf.iter_mut().enumerate() {
            let s = waveform.get(start + i).copied().unwrap_or(0.0);
            *c = Complex::new(s * win[i], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..config.bins() {
            power[k] = buf[k].norm_sqr();
        }
        let e = &bands * &power;
        energies.row_mut(t).copy_from(&e.transpose());
    }
    let max = energies.max();
    let floor = if max > 0.0 {
        config.log_floor * max
    } else {
        config.log_floor
    };
    Ok(FeatureMap {
        values: energies.map(|e| (e + floor).ln()),
        config: *config,
        source: source.to_string(),
    })
}

/// Mono 16-bit PCM or 32-bit float WAV, scaled to [-1, 1].
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, f64)> {
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(PbnError::Config(format!(
            "{}: only mono WAV is supported ({} channels)",
            path.display(),
            spec.channels
        )));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_error(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_error(path, e))?,
        (fmt, bits) => {
            return Err(PbnError::Config(format!(
                "{}: unsupported WAV encoding {fmt:?} {bits}-bit",
                path.display()
            )))
        }
    };
    Ok((samples, spec.sample_rate as f64))
}

fn wav_error(path: &Path, e: hound::Error) -> PbnError {
    match e {
        hound::Error::IoError(io) => PbnError::io(path, io),
        other => PbnError::format(0, format!("{}: {other}", path.display())),
    }
}

/// Write mono 16-bit PCM.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(|e| wav_error(path, e))?;
    }
    w.finalize().map_err(|e| wav_error(path, e))
}

fn spacing_tag(s: BandSpacing) -> u8 {
    match s {
        BandSpacing::Mel => 0,
        BandSpacing::Linear => 1,
    }
}

/// Encode maps in the `PBNF` container.
pub fn encode_features(maps: &[FeatureMap]) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(FEATURE_MAGIC);
    w.u32(FEATURE_VERSION);
    w.len_usize(maps.len());
    for m in maps {
        w.str(&m.source);
        let c = &m.config;
        w.len_usize(c.fft_size);
        w.len_usize(c.shift);
        w.len_usize(c.band_count);
        w.u8(spacing_tag(c.band_spacing));
        w.u8(0);
        w.f64(c.sample_rate);
        w.f64(c.log_floor);
        w.len_usize(m.frames());
        w.len_usize(m.bands());
        w.f64s(m.flatten());
    }
    w.buf
}

pub fn decode_features(data: &[u8]) -> Result<Vec<FeatureMap>> {
    let mut r = Reader::new(data);
    r.expect_magic(FEATURE_MAGIC)?;
    let at = r.offset();
    let version = r.u32()?;
    if version != FEATURE_VERSION {
        return Err(PbnError::format(
            at,
            format!("unsupported feature file version {version}"),
        ));
    }
    let count = r.count(1)?;
    let mut maps = Vec::with_capacity(count);
    for _ in 0..count {
        let source = r.str()?;
        let fft_size = r.u64()? as usize;
        let shift = r.u64()? as usize;
        let band_count = r.u64()? as usize;
        let at = r.offset();
        let band_spacing = match r.u8()? {
            0 => BandSpacing::Mel,
            1 => BandSpacing::Linear,
            t => {
                return Err(PbnError::format(
                    at,
                    format!("unknown band spacing tag {t}"),
                ))
            }
        };
        let at = r.offset();
        if r.u8()? != 0 {
            return Err(PbnError::format(at, "unknown window tag"));
        }
        let config = FeatureConfig {
            fft_size,
            shift,
            band_count,
            band_spacing,
            window: WindowKind::Hanning,
            sample_rate: r.f64()?,
            log_floor: r.f64()?,
        };
        let rows = r.u64()? as usize;
        let cols = r.count(0)?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| r.error("map dimensions overflow"))?;
        let values = r.f64s(n)?;
        maps.push(FeatureMap {
            values: DMatrix::from_row_slice(rows, cols, &values),
            config,
            source,
        });
    }
    if !r.is_empty() {
        return Err(r.error("trailing bytes after the last map"));
    }
    Ok(maps)
}

pub fn write_features(path: &Path, maps: &[FeatureMap]) -> Result<()> {
    fs::write(path, encode_features(maps)).map_err(|e| PbnError::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureMap>> {
    let data = fs::read(path).map_err(|e| PbnError::io(path, e))?;
    decode_features(&data)
}

/// Which axis the rows of a headerless CSV matrix run along.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CsvRows {
    Time,
    Band,
}

/// Sidecar manifest describing a headerless CSV feature matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvManifest {
    pub source: String,
    pub rows: CsvRows,
    pub config: FeatureConfig,
}

/// Import a headerless numeric CSV with its TOML sidecar manifest.
pub fn import_csv(csv_path: &Path, manifest_path: &Path) -> Result<FeatureMap> {
    let text = fs::read_to_string(manifest_path).map_err(|e| PbnError::io(manifest_path, e))?;
    let manifest: CsvManifest = toml::from_str(&text)
        .map_err(|e| PbnError::Config(format!("{}: {e}", manifest_path.display())))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(csv_path)
        .map_err(|e| csv_error(csv_path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(csv_path, e))?;
        let row = record
            .iter()
            .map(|f| {
                f.trim().parse::<f64>().map_err(|_| {
                    PbnError::Config(format!("{}: non-numeric field {f:?}", csv_path.display()))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if rows.first().is_some_and(|r| r.len() != row.len()) {
            return Err(PbnError::Config(format!(
                "{}: ragged rows",
                csv_path.display()
            )));
        }
        rows.push(row);
    }
    let (r, c) = (rows.len(), rows.first().map_or(0, |x| x.len()));
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let m = DMatrix::from_row_slice(r, c, &flat);
    let values = match manifest.rows {
        CsvRows::Time => m,
        CsvRows::Band => m.transpose(),
    };
    Ok(FeatureMap {
        values,
        config: manifest.config,
        source: manifest.source,
    })
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> PbnError {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => PbnError::io(path, io),
            _ => unreachable!(),
        }
    } else {
        PbnError::Config(format!("{}: {e}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, sr: f64, len: usize) -> Vec<f64> {
        (0..len)
            .map(|i| (2.0 * PI * freq * i as f64 / sr).sin())
            .collect()
    }

    #[test]
    fn published_shapes() {
        let cfg = FeatureConfig::exp2(250.0);
        let map = extract(&cfg, &tone(30.0, 250.0, 3072), "x").unwrap();
        assert_eq!((map.bands(), map.frames()), (40, 24));
        assert_eq!(frame_count(159_744, 256), 624);
        let ten_seconds = frame_count(160_000, 256) as i64;
        assert!((ten_seconds - 624).abs() <= 1);
    }

    #[test]
    fn too_short_and_bad_config() {
        let cfg = FeatureConfig::exp2(250.0);
        assert!(matches!(
            extract(&cfg, &[0.0; 100], "x"),
            Err(PbnError::TooShort { .. })
        ));
        let mut bad = cfg;
        bad.shift = 500;
        assert!(matches!(
            extract(&bad, &[0.0; 1000], "x"),
            Err(PbnError::Config(_))
        ));
        bad = cfg;
        bad.band_count = 300;
        assert!(band_matrix(&bad).is_err());
    }

    #[test]
    fn silent_input_is_finite() {
        let cfg = FeatureConfig::exp2(250.0);
        let map = extract(&cfg, &[0.0; 3072], "silence").unwrap();
        assert!(map.values.iter().all(|v| v.is_finite()));
        assert!((map.values[(0, 0)] - 1e-12f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bands_are_ordered_and_supported() {
        for cfg in [FeatureConfig::exp1(16_000.0), FeatureConfig::exp2(250.0)] {
            let m = band_matrix(&cfg).unwrap();
            assert!(m.iter().all(|v| *v >= 0.0));
            assert!(m.row_iter().all(|r| r.sum() > 0.0));
            let c = band_centers(&cfg).unwrap();
            assert!(c.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn linear_bands_cover_smoothly() {
        let cfg = FeatureConfig::exp2(250.0);
        let m = band_matrix(&cfg).unwrap();
        let cols: Vec<f64> = (0..cfg.bins()).map(|k| m.column(k).sum()).collect();
        let step = (cfg.bins() - 1) as f64 / 41.0;
        for (k, s) in cols.iter().enumerate() {
            let f = k as f64;
            if f > step && f < (cfg.bins() - 1) as f64 - step {
                assert!((s - 1.0).abs() < 1e-9, "bin {k}: {s}");
            }
        }
    }

    #[test]
    fn tone_peaks_in_its_band() {
        for cfg in [FeatureConfig::exp2(250.0), FeatureConfig::exp1(16_000.0)] {
            let centers = band_centers(&cfg).unwrap();
            let bin_hz = cfg.sample_rate / cfg.fft_size as f64;
            for k in [5, 20, cfg.band_count - 5] {
                let f = (centers[k] / bin_hz).round() * bin_hz;
                let map =
                    extract(&cfg, &tone(f, cfg.sample_rate, 12 * cfg.fft_size), "tone").unwrap();
                for row in map.values.row_iter() {
                    assert_eq!(row.transpose().argmax().0, k);
                }
            }
        }
    }

    #[test]
    fn feature_container_round_trip() {
        let cfg = FeatureConfig::exp2(250.0);
        let a = extract(&cfg, &tone(20.0, 250.0, 3072), "a").unwrap();
        let b = extract(&cfg, &tone(60.0, 250.0, 4000), "b").unwrap();
        let bytes = encode_features(&[a.clone(), b.clone()]);
        let back = decode_features(&bytes).unwrap();
        assert_eq!(back, vec![a, b]);
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                decode_features(&bytes[..cut]),
                Err(PbnError::Format { .. })
            ));
        }
    }
}
