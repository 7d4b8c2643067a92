//! The `DAAC` activation container.
//!
//! Layout: magic `DAAC`, version byte `0x01`, little-endian `u32` header
//! length, UTF-8 JSON header
//! `{"dtype":"f32","layers":[{"name","c","h","w"}],"input_id","perturbation"}`,
//! then the little-endian `f32` payload in layer, channel, row-major order.
//!
//! Prediction records reuse the container with one `softmax/t{i}` layer per
//! forward pass (`c` = classes); label maps use a single `labels` layer.

use std::fs;
use std::path::Path;

use actguard_core::record::{ActivationRecord, LabelMap, Layer, PredictionRecord, SoftmaxMap};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RECORD_MAGIC: &[u8; 4] = b"DAAC";
pub const VERSION: u8 = 0x01;
pub const LABELS_LAYER: &str = "labels";
const SOFTMAX_PREFIX: &str = "softmax/t";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerHeader {
    pub name: String,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordHeader {
    pub dtype: String,
    pub layers: Vec<LayerHeader>,
    pub input_id: String,
    pub perturbation: String,
}

/// Magic, version, header length, header, payload.
pub(crate) fn frame(magic: &[u8; 4], header: &[u8], payload_len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + header.len() + payload_len);
    out.extend_from_slice(magic);
    out.push(VERSION);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    out
}

/// Splits a framed buffer into `(header, payload)`.
pub(crate) fn unframe<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < 9 || &bytes[..4] != magic {
        return Err(Error::Format(format!(
            "expected {} magic bytes",
            String::from_utf8_lossy(magic)
        )));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {:#04x}", bytes[4])));
    }
    let len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let rest = &bytes[9..];
    if rest.len() < len {
        return Err(Error::Corrupt(format!(
            "header claims {len} bytes, {} present",
            rest.len()
        )));
    }
    Ok(rest.split_at(len))
}

pub(crate) fn f32_payload(values: impl Iterator<Item = f32>, out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn read_f32s(payload: &[u8], expected: usize) -> Result<Vec<f32>> {
    if payload.len() != expected * 4 {
        return Err(Error::Corrupt(format!(
            "payload has {} bytes, header describes {} values",
            payload.len(),
            expected
        )));
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

pub fn encode_record(record: &ActivationRecord) -> Vec<u8> {
    let header = RecordHeader {
        dtype: "f32".into(),
        layers: record
            .layers
            .iter()
            .map(|l| LayerHeader {
                name: l.name.clone(),
                c: l.channels,
                h: l.height,
                w: l.width,
            })
            .collect(),
        input_id: record.input_id.clone(),
        perturbation: record.perturbation.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let n: usize = record.layers.iter().map(|l| l.values.len()).sum();
    let mut out = frame(RECORD_MAGIC, &json, 4 * n);
    f32_payload(record.layers.iter().flat_map(|l| l.values.iter().copied()), &mut out);
    out
}

pub fn decode_record(bytes: &[u8]) -> Result<ActivationRecord> {
    let (header, payload) = unframe(bytes, RECORD_MAGIC)?;
    let header: RecordHeader =
        serde_json::from_slice(header).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    if header.dtype != "f32" {
        return Err(Error::Format(format!("unsupported dtype {}", header.dtype)));
    }
    let total = header
        .layers
        .iter()
        .try_fold(0usize, |acc, l| {
            l.c.checked_mul(l.h)
                .and_then(|v| v.checked_mul(l.w))
                .and_then(|v| acc.checked_add(v))
        })
        .ok_or_else(|| Error::Corrupt("layer sizes overflow".into()))?;
    let values = read_f32s(payload, total)?;
    let mut layers = Vec::with_capacity(header.layers.len());
    let mut at = 0;
    for l in header.layers {
        let n = l.c * l.h * l.w;
        layers.push(Layer::new(l.name, l.c, l.h, l.w, values[at..at + n].to_vec())?);
        at += n;
    }
    Ok(ActivationRecord {
        input_id: header.input_id,
        perturbation: header.perturbation,
        layers,
    })
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_record(record: &ActivationRecord, path: &Path) -> Result<()> {
    write_bytes(path, &encode_record(record))
}

pub fn read_record(path: &Path) -> Result<ActivationRecord> {
    decode_record(&read_bytes(path)?).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Corrupt(m) => Error::Corrupt(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Packs the softmax passes as `softmax/t{i}` layers.
pub fn prediction_to_record(pred: &PredictionRecord, perturbation: &str) -> ActivationRecord {
    ActivationRecord {
        input_id: pred.input_id.clone(),
        perturbation: perturbation.into(),
        layers: pred
            .passes
            .iter()
            .enumerate()
            .map(|(i, m)| Layer {
                name: format!("{SOFTMAX_PREFIX}{i}"),
                channels: m.classes,
                height: m.height,
                width: m.width,
                values: m.probs.clone(),
            })
            .collect(),
    }
}

pub fn record_to_prediction(record: ActivationRecord) -> Result<PredictionRecord> {
    let mut passes = Vec::with_capacity(record.layers.len());
    for (i, l) in record.layers.into_iter().enumerate() {
        if l.name != format!("{SOFTMAX_PREFIX}{i}") {
            return Err(Error::Format(format!(
                "prediction layer {i} is named '{}'",
                l.name
            )));
        }
        passes.push(SoftmaxMap::new(l.channels, l.height, l.width, l.values)?);
    }
    let pred = PredictionRecord {
        input_id: record.input_id,
        passes,
    };
    pred.validate()?;
    Ok(pred)
}

pub fn write_prediction(pred: &PredictionRecord, perturbation: &str, path: &Path) -> Result<()> {
    write_record(&prediction_to_record(pred, perturbation), path)
}

pub fn read_prediction(path: &Path) -> Result<PredictionRecord> {
    record_to_prediction(read_record(path)?)
}

pub fn label_map_to_record(map: &LabelMap, input_id: &str, perturbation: &str) -> ActivationRecord {
    ActivationRecord {
        input_id: input_id.into(),
        perturbation: perturbation.into(),
        layers: vec![Layer {
            name: LABELS_LAYER.into(),
            channels: 1,
            height: map.height,
            width: map.width,
            values: map.labels.iter().map(|&l| l as f32).collect(),
        }],
    }
}

pub fn record_to_label_map(record: &ActivationRecord) -> Result<LabelMap> {
    let [layer] = record.layers.as_slice() else {
        return Err(Error::Format("label map must hold exactly one layer".into()));
    };
    if layer.name != LABELS_LAYER || layer.channels != 1 {
        return Err(Error::Format(format!(
            "expected a single-channel '{LABELS_LAYER}' layer, found '{}'",
            layer.name
        )));
    }
    let mut labels = Vec::with_capacity(layer.values.len());
    for &v in &layer.values {
        if !(v >= 0.0 && v.fract() == 0.0 && v < 16_777_216.0) {
            return Err(Error::Format(format!("label value {v} is not a class id")));
        }
        labels.push(v as u32);
    }
    Ok(LabelMap::new(layer.height, layer.width, labels)?)
}

pub fn write_label_map(map: &LabelMap, input_id: &str, perturbation: &str, path: &Path) -> Result<()> {
    write_record(&label_map_to_record(map, input_id, perturbation), path)
}

pub fn read_label_map(path: &Path) -> Result<LabelMap> {
    record_to_label_map(&read_record(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ActivationRecord {
        ActivationRecord {
            input_id: "img-1".into(),
            perturbation: "fog".into(),
            layers: vec![Layer::new("enc.conv1", 1, 2, 2, vec![0.5, -1.0, 3.25, 1e-7]).unwrap()],
        }
    }

    #[test]
    fn roundtrip_one_layer() {
        let r = tiny();
        assert_eq!(decode_record(&encode_record(&r)).unwrap(), r);
    }

    #[test]
    fn layout_is_documented_one() {
        let bytes = encode_record(&tiny());
        assert_eq!(&bytes[..5], b"DAAC\x01");
        let len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[9..9 + len]).unwrap();
        assert_eq!(header["dtype"], "f32");
        assert_eq!(header["layers"][0]["c"], 1);
        assert_eq!(bytes.len(), 9 + len + 16);
        assert_eq!(&bytes[9 + len..9 + len + 4], &0.5f32.to_le_bytes());
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut bytes = encode_record(&tiny());
        bytes[0] = b'X';
        assert!(matches!(decode_record(&bytes), Err(Error::Format(_))));
        let mut bytes = encode_record(&tiny());
        bytes[4] = 2;
        assert!(matches!(decode_record(&bytes), Err(Error::Format(_))));
        assert!(matches!(decode_record(b"DA"), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_payload_mismatch() {
        let mut bytes = encode_record(&tiny());
        bytes.truncate(bytes.len() - 3);
        let err = decode_record(&bytes).unwrap_err();
        assert!(matches!(err, Error::Corrupt(_)));
        assert!(err.to_string().starts_with("corrupt record"));
        let mut bytes = encode_record(&tiny());
        bytes.extend_from_slice(&[0; 4]);
        assert!(matches!(decode_record(&bytes), Err(Error::Corrupt(_))));
    }

    #[test]
    fn prediction_and_labels_roundtrip() {
        let pred = PredictionRecord {
            input_id: "img-1".into(),
            passes: vec![
                SoftmaxMap::new(2, 1, 2, vec![0.25, 1.0, 0.75, 0.0]).unwrap(),
                SoftmaxMap::new(2, 1, 2, vec![0.5, 0.5, 0.5, 0.5]).unwrap(),
            ],
        };
        let rec = prediction_to_record(&pred, "none");
        assert_eq!(rec.layers[1].name, "softmax/t1");
        assert_eq!(record_to_prediction(decode_record(&encode_record(&rec)).unwrap()).unwrap(), pred);

        let map = LabelMap::new(2, 2, vec![0, 18, 3, 3]).unwrap();
        let rec = label_map_to_record(&map, "img-1", "none");
        assert_eq!(record_to_label_map(&rec).unwrap(), map);
        let mut bad = rec.clone();
        bad.layers[0].values[0] = 0.5;
        assert!(record_to_label_map(&bad).is_err());
    }
}
