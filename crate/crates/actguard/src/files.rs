//! Manifest, sampling key, model and head-fit files.
//!
//! Models and fits share the `DAAF` framing of the activation container
//! (magic, version `0x01`, `u32` header length, JSON header, payload).
//! The header's `kind` is `flow`, `mahalanobis` or `hbos`.
//!
//! Flow payload: the trainable parameters as little-endian `f32`, block by
//! block. Inside a block: ActNorm `log_scale[D]`, ActNorm `bias[D]`, MLP
//! hidden weights `[width][d]` and biases `[width]` (MLP subnets only),
//! output weights `[2m][in]` and biases `[2m]` (rows `0..m` feed the log
//! scales, rows `m..2m` the shifts), then for invertible-linear mixing the
//! strictly lower `L` and strictly upper `U` triangles packed by rows and
//! `log |diag U|[D]`. Permutations, diagonal signs and the ActNorm flags
//! are in the header.
//!
//! Fit payloads are little-endian `f64`: Mahalanobis stores `mean[D]` then
//! the row-major covariance `[D][D]`; HBOS stores `min[D]`, `max[D]`, then
//! the normalized heights `[D][k]`.

use std::path::{Path, PathBuf};

use actguard_core::flow::{BlockFixed, FlowParams, FlowSpec};
use actguard_core::dataset::{Manifest, ManifestEntry};
use actguard_core::sampling::SamplingKey;
use actguard_core::scoring::{FittedHead, HbosFit, MahalanobisFit};
use serde::{Deserialize, Serialize};

use crate::container::{f32_payload, frame, read_bytes, read_f32s, unframe, write_bytes};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"DAAF";

pub fn to_json_pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("value serializes");
    v.push(b'\n');
    v
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}

/// A manifest together with the directory its paths are relative to.
#[derive(Debug, Clone)]
pub struct ManifestFile {
    pub manifest: Manifest,
    pub base: PathBuf,
}

impl ManifestFile {
    pub fn load(path: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(path)?;
        manifest.validate()?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { manifest, base })
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.base.join(relative)
    }

    pub fn record_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.resolve(&entry.path)
    }
}

pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    write_bytes(path, &to_json_pretty(manifest))
}

pub fn save_key(key: &SamplingKey, path: &Path) -> Result<()> {
    write_bytes(path, &to_json_pretty(key))
}

pub fn load_key(path: &Path) -> Result<SamplingKey> {
    let key: SamplingKey = read_json(path)?;
    key.validate()?;
    Ok(key)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum DaafHeader {
    Flow {
        dtype: String,
        key_id: String,
        dim: usize,
        n_params: usize,
        spec: FlowSpec,
        blocks: Vec<BlockFixed>,
    },
    Mahalanobis {
        dtype: String,
        key_id: String,
        dim: usize,
        ridge: f64,
        layout: String,
    },
    Hbos {
        dtype: String,
        key_id: String,
        dim: usize,
        k: usize,
        layout: String,
    },
}

/// A trained flow and the key it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub params: FlowParams,
    pub key_id: String,
}

pub fn encode_model(params: &FlowParams, key_id: &str) -> Vec<u8> {
    let header = DaafHeader::Flow {
        dtype: "f32".into(),
        key_id: key_id.into(),
        dim: params.dim(),
        n_params: params.num_params(),
        spec: *params.spec(),
        blocks: params.fixed().to_vec(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = frame(MODEL_MAGIC, &json, 4 * params.num_params());
    f32_payload(params.theta().iter().map(|&v| v as f32), &mut out);
    out
}

fn parse_header(bytes: &[u8]) -> Result<(DaafHeader, &[u8])> {
    let (header, payload) = unframe(bytes, MODEL_MAGIC)?;
    let header: DaafHeader =
        serde_json::from_slice(header).map_err(|e| Error::Format(format!("bad model header: {e}")))?;
    Ok((header, payload))
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelFile> {
    match parse_header(bytes)? {
        (
            DaafHeader::Flow {
                dtype,
                key_id,
                dim,
                n_params,
                spec,
                blocks,
            },
            payload,
        ) => {
            if dtype != "f32" || dim != spec.dim {
                return Err(Error::Format(format!("flow header has dtype {dtype}, dim {dim}")));
            }
            let theta = read_f32s(payload, n_params)?.into_iter().map(f64::from).collect();
            Ok(ModelFile {
                params: FlowParams::from_parts(spec, theta, blocks)?,
                key_id,
            })
        }
        _ => Err(Error::Format("file holds a head fit, not a flow".into())),
    }
}

pub fn save_model(params: &FlowParams, key_id: &str, path: &Path) -> Result<()> {
    write_bytes(path, &encode_model(params, key_id))
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    decode_model(&read_bytes(path)?)
}

fn f64_payload(values: impl Iterator<Item = f64>, out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_f64s(payload: &[u8], expected: usize) -> Result<Vec<f64>> {
    if payload.len() != expected * 8 {
        return Err(Error::Corrupt(format!(
            "fit payload has {} bytes, header describes {expected} values",
            payload.len()
        )));
    }
    Ok(payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

/// Encodes a fitted Mahalanobis or HBOS head; parameter-free heads have no
/// fit file.
pub fn encode_fit(fit: &FittedHead, key_id: &str) -> Option<Vec<u8>> {
    let (header, values): (DaafHeader, Vec<f64>) = match fit {
        FittedHead::Mahalanobis(m) => (
            DaafHeader::Mahalanobis {
                dtype: "f64".into(),
                key_id: key_id.into(),
                dim: m.dim(),
                ridge: m.ridge(),
                layout: "mean,covariance".into(),
            },
            m.mean().iter().chain(m.covariance()).copied().collect(),
        ),
        FittedHead::Hbos(h) => (
            DaafHeader::Hbos {
                dtype: "f64".into(),
                key_id: key_id.into(),
                dim: h.dim(),
                k: h.k(),
                layout: "min,max,heights".into(),
            },
            h.min().iter().chain(h.max()).chain(h.heights()).copied().collect(),
        ),
        FittedHead::Euclidean | FittedHead::Harmonic => return None,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = frame(MODEL_MAGIC, &json, 8 * values.len());
    f64_payload(values.into_iter(), &mut out);
    Some(out)
}

/// Decodes a head fit, returning it with its key id.
pub fn decode_fit(bytes: &[u8]) -> Result<(FittedHead, String)> {
    match parse_header(bytes)? {
        (DaafHeader::Mahalanobis { dtype, key_id, dim, ridge, .. }, payload) if dtype == "f64" => {
            let v = read_f64s(payload, dim + dim * dim)?;
            let (mean, cov) = v.split_at(dim);
            let fit = MahalanobisFit::from_moments(mean.to_vec(), cov.to_vec(), Some(ridge))?;
            Ok((FittedHead::Mahalanobis(fit), key_id))
        }
        (DaafHeader::Hbos { dtype, key_id, dim, k, .. }, payload) if dtype == "f64" => {
            let v = read_f64s(payload, 2 * dim + dim * k)?;
            let fit = HbosFit::from_parts(k, v[..dim].to_vec(), v[dim..2 * dim].to_vec(), v[2 * dim..].to_vec())?;
            Ok((FittedHead::Hbos(fit), key_id))
        }
        (DaafHeader::Flow { .. }, _) => Err(Error::Format("file holds a flow, not a head fit".into())),
        _ => Err(Error::Format("head fit payload must be f64".into())),
    }
}

pub fn save_fit(fit: &FittedHead, key_id: &str, path: &Path) -> Result<bool> {
    match encode_fit(fit, key_id) {
        Some(bytes) => write_bytes(path, &bytes).map(|_| true),
        None => Ok(false),
    }
}

pub fn load_fit(path: &Path) -> Result<(FittedHead, String)> {
    decode_fit(&read_bytes(path)?)
}

/// FNV-1a 64 of a file's bytes, hex encoded; identifies models in reports.
pub fn content_id(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use actguard_core::flow::{Coupling, Mixing, Subnet};
    use actguard_core::SeededRng;

    #[test]
    fn model_roundtrip_is_f32_exact() {
        let spec = FlowSpec::new(5, 3, Coupling::Affine, Mixing::InvertibleLinear, Subnet::Mlp { width: 4 });
        let mut rng = SeededRng::new(3);
        let mut p = FlowParams::new(spec, &mut rng, false).unwrap();
        p.randomize(&mut rng, 0.5);
        let bytes = encode_model(&p, "abc");
        assert_eq!(&bytes[..5], b"DAAF\x01");
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back.key_id, "abc");
        assert_eq!(back.params.fixed(), p.fixed());
        for (a, b) in back.params.theta().iter().zip(p.theta()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        // re-encoding the decoded model is byte-identical
        assert_eq!(encode_model(&back.params, "abc"), bytes);
    }

    #[test]
    fn fits_roundtrip_exactly() {
        let mut rng = SeededRng::new(9);
        let latents: Vec<Vec<f64>> = (0..30).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        for head in [
            actguard_core::scoring::Head::Mahalanobis,
            actguard_core::scoring::Head::Hbos { k: 5 },
        ] {
            let fit = FittedHead::fit(head, &latents).unwrap();
            let (back, key) = decode_fit(&encode_fit(&fit, "k1").unwrap()).unwrap();
            assert_eq!(key, "k1");
            assert_eq!(back, fit);
        }
        assert!(encode_fit(&FittedHead::Euclidean, "k1").is_none());
    }

    #[test]
    fn model_and_fit_are_not_interchangeable() {
        let spec = FlowSpec::new(2, 1, Coupling::Gin, Mixing::RandomPermutation, Subnet::Linear);
        let p = FlowParams::identity(spec).unwrap();
        assert!(matches!(decode_fit(&encode_model(&p, "x")), Err(Error::Format(_))));
        let fit = FittedHead::fit(actguard_core::scoring::Head::Hbos { k: 2 }, &[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(matches!(decode_model(&encode_fit(&fit, "x").unwrap()), Err(Error::Format(_))));
    }
}
