//! `PBN1` model files: a tagged-section binary container holding a network
//! (`NETW`) and optionally an HMM tail (`HMMG`), plus a TOML sidecar with
//! human-readable metadata.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::conv::Conv2d;
use crate::error::{PbnError, Result};
use crate::expfam::Family;
use crate::hmm::HmmModel;
use crate::layer::{Activation, LayerSpec, SpaOrder};
use crate::network::{NetworkModel, OutputDensitySpec, OutputKind};

const MAGIC: &[u8; 4] = b"PBN1";
const VERSION: u32 = 1;
const NETWORK_TAG: &[u8; 4] = b"NETW";
const HMM_TAG: &[u8; 4] = b"HMMG";

/// Everything one class model needs for scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub network: NetworkModel,
    pub hmm: Option<HmmModel>,
}

/// Sidecar written next to every model file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub class_index: usize,
    pub class_name: String,
    /// Hash of the configuration that produced the model.
    pub config_hash: String,
    pub layers: Vec<String>,
    pub tap: Option<usize>,
    pub has_hmm: bool,
}

impl ModelMeta {
    pub fn describe(
        bundle: &ModelBundle,
        class_index: usize,
        class_name: &str,
        config_hash: &str,
    ) -> Self {
        ModelMeta {
            class_index,
            class_name: class_name.to_string(),
            config_hash: config_hash.to_string(),
            layers: bundle
                .network
                .layers
                .iter()
                .map(|l| {
                    format!(
                        "{}x{} {} -> {}{}",
                        l.n_in(),
                        l.n_out(),
                        l.input_family.family.name(),
                        l.activation.name(),
                        if l.conv.is_some() { " (conv)" } else { "" }
                    )
                })
                .collect(),
            tap: bundle.network.tap,
            has_hmm: bundle.hmm.is_some(),
        }
    }
}

fn activation_tag(a: Activation) -> u8 {
    match a {
        Activation::Linear => 0,
        Activation::Family(f) => 1 + f.tag(),
    }
}

fn activation_from_tag(t: u8) -> Option<Activation> {
    match t {
        0 => Some(Activation::Linear),
        t => Family::from_tag(t - 1).map(Activation::Family),
    }
}

fn output_tag(k: OutputKind) -> u8 {
    match k {
        OutputKind::TedIndicator => 0,
        OutputKind::StandardNormal => 1,
        OutputKind::None => 2,
    }
}

fn encode_network(net: &NetworkModel, w: &mut Writer) {
    w.len_usize(net.layers.len());
    for l in &net.layers {
        w.u8(l.input_family.family.tag());
        w.u8(activation_tag(l.activation));
        match &l.conv {
            Some(c) => {
                w.u8(1);
                for v in [
                    c.in_time, c.in_freq, c.in_ch, c.out_ch, c.kernel_t, c.kernel_f, c.stride_t,
                    c.stride_f, c.pad_t, c.pad_f,
                ] {
                    w.len_usize(v);
                }
                w.f64s(c.extract_kernel(&l.w));
                w.f64s(c.extract_bias(&l.b));
            }
            None => {
                w.u8(0);
                w.len_usize(l.n_in());
                w.len_usize(l.n_out());
                w.f64s(l.w.iter().copied());
                w.f64s(l.b.iter().copied());
            }
        }
    }
    w.len_usize(net.gaussian_group_len);
    w.u8(net.tap.is_some() as u8);
    w.len_usize(net.tap.unwrap_or(0));
    let o = &net.output;
    w.u8(output_tag(o.kind));
    w.len_usize(o.class_index);
    w.len_usize(o.num_classes);
    w.f64(o.confidence);
    w.u8(match net.spa_order {
        SpaOrder::First => 0,
        SpaOrder::Corrected => 1,
    });
}

fn decode_network(r: &mut Reader) -> Result<NetworkModel> {
    let n_layers = r.count(1)?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let at = r.offset();
        let family =
            Family::from_tag(r.u8()?).ok_or_else(|| PbnError::format(at, "unknown family tag"))?;
        let at = r.offset();
        let activation = activation_from_tag(r.u8()?)
            .ok_or_else(|| PbnError::format(at, "unknown activation tag"))?;
        let at = r.offset();
        let layer = match r.u8()? {
            1 => {
                let mut g = [0usize; 10];
                for v in &mut g {
                    *v = r.u64()? as usize;
                }
                let c = Conv2d {
                    in_time: g[0],
                    in_freq: g[1],
                    in_ch: g[2],
                    out_ch: g[3],
                    kernel_t: g[4],
                    kernel_f: g[5],
                    stride_t: g[6],
                    stride_f: g[7],
                    pad_t: g[8],
                    pad_f: g[9],
                };
                c.validate()
                    .map_err(|e| PbnError::format(at, e.to_string()))?;
                let kernel = r.f64s(c.kernel_len())?;
                let bias = r.f64s(c.out_ch)?;
                LayerSpec::convolutional(c, &kernel, &bias, family, activation)
            }
            0 => {
                let n = r.count(8)?;
                let m = r.count(8)?;
                let count = n
                    .checked_mul(m)
                    .ok_or_else(|| r.error("layer size overflows"))?;
                let w = DMatrix::from_column_slice(n, m, &r.f64s(count)?);
                let b = DVector::from_vec(r.f64s(m)?);
                LayerSpec::new(w, b, family, activation)
            }
            t => return Err(PbnError::format(at, format!("unknown layer kind {t}"))),
        }
        .map_err(|e| PbnError::format(at, format!("invalid layer: {e}")))?;
        layers.push(layer);
    }
    let at = r.offset();
    let group = r.u64()? as usize;
    let has_tap = r.u8()? != 0;
    let tap = r.u64()? as usize;
    let kind_at = r.offset();
    let kind = match r.u8()? {
        0 => OutputKind::TedIndicator,
        1 => OutputKind::StandardNormal,
        2 => OutputKind::None,
        t => {
            return Err(PbnError::format(
                kind_at,
                format!("unknown output kind {t}"),
            ))
        }
    };
    let output = OutputDensitySpec {
        kind,
        class_index: r.u64()? as usize,
        num_classes: r.u64()? as usize,
        confidence: r.f64()?,
    };
    let order_at = r.offset();
    let spa_order = match r.u8()? {
        0 => SpaOrder::First,
        1 => SpaOrder::Corrected,
        t => return Err(PbnError::format(order_at, format!("unknown SPA order {t}"))),
    };
    let net = NetworkModel {
        layers,
        gaussian_group_len: group,
        tap: has_tap.then_some(tap),
        output,
        spa_order,
    };
    net.validate()
        .map_err(|e| PbnError::format(at, format!("invalid network: {e}")))?;
    Ok(net)
}

fn section(w: &mut Writer, tag: &[u8; 4], body: Writer) {
    w.bytes(tag);
    w.len_usize(body.buf.len());
    w.bytes(&body.buf);
}

pub fn encode_bundle(bundle: &ModelBundle) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u32(1 + bundle.hmm.is_some() as u32);
    let mut net = Writer::default();
    encode_network(&bundle.network, &mut net);
    section(&mut w, NETWORK_TAG, net);
    if let Some(h) = &bundle.hmm {
        let mut hw = Writer::default();
        h.encode(&mut hw);
        section(&mut w, HMM_TAG, hw);
    }
    w.buf
}

pub fn decode_bundle(data: &[u8]) -> Result<ModelBundle> {
    let mut r = Reader::new(data);
    r.expect_magic(MAGIC)?;
    let at = r.offset();
    let version = r.u32()?;
    if version != VERSION {
        return Err(PbnError::format(
            at,
            format!("unsupported model file version {version}"),
        ));
    }
    let sections = r.u32()?;
    let mut network = None;
    let mut hmm = None;
    for _ in 0..sections {
        let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
        let len = r.count(1)?;
        let mut body = r.section(len)?;
        match &tag {
            NETWORK_TAG => network = Some(decode_network(&mut body)?),
            HMM_TAG => hmm = Some(HmmModel::decode(&mut body)?),
            // unknown sections are skipped for forward compatibility
            _ => continue,
        }
        if !body.is_empty() {
            return Err(body.error(format!(
                "trailing bytes in section {}",
                String::from_utf8_lossy(&tag)
            )));
        }
    }
    if !r.is_empty() {
        return Err(r.error("trailing bytes after the last section"));
    }
    Ok(ModelBundle {
        network: network.ok_or_else(|| PbnError::format(0, "model file has no NETW section"))?,
        hmm,
    })
}

/// Path of the TOML sidecar that goes with `model_path`.
pub fn sidecar_path(model_path: &Path) -> PathBuf {
    model_path.with_extension("toml")
}

pub fn save_model(path: &Path, bundle: &ModelBundle, meta: &ModelMeta) -> Result<()> {
    fs::write(path, encode_bundle(bundle)).map_err(|e| PbnError::io(path, e))?;
    let side = sidecar_path(path);
    let text = toml::to_string(meta).map_err(|e| PbnError::Config(format!("sidecar: {e}")))?;
    fs::write(&side, text).map_err(|e| PbnError::io(&side, e))
}

pub fn load_model(path: &Path) -> Result<ModelBundle> {
    let data = fs::read(path).map_err(|e| PbnError::io(path, e))?;
    decode_bundle(&data).map_err(|e| match e {
        PbnError::Format { offset, message } => PbnError::Format {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        e => e,
    })
}

pub fn load_meta(path: &Path) -> Result<ModelMeta> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| PbnError::io(&side, e))?;
    toml::from_str(&text).map_err(|e| PbnError::Config(format!("{}: {e}", side.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmm::Gmm;

    fn bundle() -> ModelBundle {
        let geom = Conv2d {
            in_time: 4,
            in_freq: 3,
            in_ch: 1,
            out_ch: 2,
            kernel_t: 2,
            kernel_f: 3,
            stride_t: 2,
            stride_f: 1,
            pad_t: 1,
            pad_f: 0,
        };
        let kernel: Vec<f64> = (0..geom.kernel_len())
            .map(|i| 0.1 * i as f64 - 0.2)
            .collect();
        let l0 = LayerSpec::convolutional(
            geom,
            &kernel,
            &[0.1, -0.1],
            Family::Gaussian,
            Activation::Family(Family::TruncGaussian),
        )
        .unwrap();
        let w = DMatrix::from_fn(6, 2, |i, j| (i as f64 - j as f64) * 0.3);
        let l1 = LayerSpec::new(
            w,
            DVector::from_vec(vec![0.5, -0.5]),
            Family::TruncGaussian,
            Activation::Family(Family::TruncExponential),
        )
        .unwrap();
        let net = NetworkModel::new(vec![l0, l1], OutputDensitySpec::ted_indicator(1, 2, 300.0))
            .unwrap()
            .with_tap(1)
            .unwrap();
        let hmm = HmmModel {
            initial: DVector::from_vec(vec![1.0]),
            trans: DMatrix::from_element(1, 1, 1.0),
            states: vec![Gmm {
                weights: vec![1.0],
                means: vec![DVector::from_vec(vec![0.0, 1.0])],
                vars: vec![DVector::from_vec(vec![0.5, 0.5])],
            }],
            floor: 0.12,
        };
        ModelBundle {
            network: net,
            hmm: Some(hmm),
        }
    }

    #[test]
    fn round_trip() {
        let b = bundle();
        let bytes = encode_bundle(&b);
        assert_eq!(decode_bundle(&bytes).unwrap(), b);
        let plain = ModelBundle { hmm: None, ..b };
        assert_eq!(decode_bundle(&encode_bundle(&plain)).unwrap(), plain);
    }

    #[test]
    fn truncation_reports_offsets() {
        let bytes = encode_bundle(&bundle());
        for cut in [2, 9, 20, bytes.len() / 2, bytes.len() - 1] {
            match decode_bundle(&bytes[..cut]) {
                Err(PbnError::Format { offset, .. }) => assert!(offset <= cut as u64),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn files_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("class0.pbn");
        let b = bundle();
        let meta = ModelMeta::describe(&b, 0, "dog", "abc123");
        save_model(&path, &b, &meta).unwrap();
        assert_eq!(load_model(&path).unwrap(), b);
        assert_eq!(load_meta(&path).unwrap(), meta);
        assert!(meta.layers[0].ends_with("(conv)"));
    }
}
