//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic, a little-endian `u32` format version, a `u32`
//! header length, the JSON header, every tensor as little-endian `f32` in
//! header order, and finally the SHA-256 of all preceding bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::rng::hex;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 8] = b"RVLMCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    /// What the tensors describe, e.g. `"qformer"` or `"lm"`.
    pub kind: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub extras: serde_json::Value,
}

/// SHA-256 over tensor names, shapes, and `f32` values. Used as the frozen
/// model seal; independent of the scalar type the model runs in.
pub fn param_checksum<T: Scalar, P: ParamSet<T>>(params: &P) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.named() {
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for &v in t.data() {
            h.update((v.as_f64() as f32).to_le_bytes());
        }
    }
    hex(&h.finalize())
}

pub fn encode_checkpoint(header: &CheckpointHeader, tensors: &[(String, &Tensor<f32>)]) -> Result<Vec<u8>> {
    if header.tensors.len() != tensors.len() {
        return Err(Error::Checkpoint("header and tensor list disagree".into()));
    }
    for (entry, (name, t)) in header.tensors.iter().zip(tensors) {
        if &entry.name != name || entry.shape != t.shape() {
            return Err(Error::Checkpoint(format!(
                "header entry {} does not describe tensor {name}",
                entry.name
            )));
        }
    }
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(16 + json.len() + tensors.iter().map(|(_, t)| 4 * t.len()).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header.version.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in tensors {
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Tensors in file order, keyed by parameter name.
pub type NamedTensors = Vec<(String, Tensor<f32>)>;

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, NamedTensors)> {
    let truncated = || Error::Checkpoint("file is truncated".into());
    if bytes.len() < MAGIC.len() + 8 + DIGEST_LEN {
        return Err(truncated());
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let body_end = bytes.len() - DIGEST_LEN;
    if 16 + header_len > body_end {
        return Err(truncated());
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
    let expected: usize = header
        .tensors
        .iter()
        .map(|e| e.shape.iter().product::<usize>() * 4)
        .sum();
    let data = &bytes[16 + header_len..body_end];
    if data.len() != expected {
        // A short file shifts the digest into the data region; report that
        // as truncation rather than a checksum failure.
        return Err(if data.len() < expected {
            truncated()
        } else {
            Error::Checkpoint(format!("{} trailing bytes after tensor data", data.len() - expected))
        });
    }
    if Sha256::digest(&bytes[..body_end]).as_slice() != &bytes[body_end..] {
        return Err(Error::Checksum("checkpoint digest mismatch".into()));
    }
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let vals = data[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        offset += 4 * n;
        tensors.push((e.name.clone(), Tensor::from_vec(&e.shape, vals)?));
    }
    Ok((header, tensors))
}

/// Writes `params` under the given kind. The file is written to a sibling
/// temporary and renamed into place.
pub fn save_params<P: ParamSet<f32>>(
    path: &Path,
    kind: &str,
    config: &impl Serialize,
    seed: u64,
    extras: serde_json::Value,
    params: &P,
) -> Result<()> {
    let named = params.named();
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        kind: kind.to_string(),
        config: serde_json::to_value(config)?,
        seed,
        tensors: named
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        extras,
    };
    let bytes = encode_checkpoint(&header, &named)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, NamedTensors)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Copies stored tensors into `target`, which must have exactly the same
/// names and shapes.
pub fn restore_params<P: ParamSet<f32>>(
    header: &CheckpointHeader,
    tensors: Vec<(String, Tensor<f32>)>,
    kind: &str,
    target: &mut P,
) -> Result<()> {
    if header.kind != kind {
        return Err(Error::Checkpoint(format!(
            "expected a {kind} checkpoint, found {}",
            header.kind
        )));
    }
    let mut slots = target.named_mut();
    if slots.len() != tensors.len() {
        return Err(Error::Shape(format!(
            "checkpoint holds {} tensors, model expects {}",
            tensors.len(),
            slots.len()
        )));
    }
    for ((name, stored), (want, slot)) in tensors.into_iter().zip(slots.iter_mut()) {
        if &name != want || stored.shape() != slot.shape() {
            return Err(Error::Shape(format!(
                "checkpoint tensor {name} {:?} does not fit model tensor {want} {:?}",
                stored.shape(),
                slot.shape()
            )));
        }
        **slot = stored;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerNorm;

    fn sample() -> LayerNorm<f32> {
        let mut ln = LayerNorm::new(3);
        ln.gamma.data_mut().copy_from_slice(&[1.5, -2.0, 0.25]);
        ln.beta.data_mut().copy_from_slice(&[0.1, 0.2, f32::MIN_POSITIVE]);
        ln
    }

    fn roundtrip_bytes() -> Vec<u8> {
        let ln = sample();
        let named = ln.named();
        let header = CheckpointHeader {
            version: FORMAT_VERSION,
            kind: "ln".into(),
            config: serde_json::json!({"dim": 3}),
            seed: 4,
            tensors: named
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            extras: serde_json::Value::Null,
        };
        encode_checkpoint(&header, &named).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (h, tensors) = decode_checkpoint(&roundtrip_bytes()).unwrap();
        let mut back = LayerNorm::new(3);
        restore_params(&h, tensors, "ln", &mut back).unwrap();
        assert_eq!(back, sample());
        assert_eq!(h.seed, 4);
    }

    #[test]
    fn truncation_and_corruption_detected() {
        let bytes = roundtrip_bytes();
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 5]),
            Err(Error::Checkpoint(_))
        ));
        assert!(matches!(decode_checkpoint(&bytes[..10]), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - DIGEST_LEN - 2] ^= 1;
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Checksum(_))));
    }

    #[test]
    fn version_mismatch_rejected() {
        let mut bytes = roundtrip_bytes();
        bytes[8] = 9;
        let err = decode_checkpoint(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (h, tensors) = decode_checkpoint(&roundtrip_bytes()).unwrap();
        let mut other = LayerNorm::<f32>::new(4);
        assert!(matches!(
            restore_params(&h, tensors.clone(), "ln", &mut other),
            Err(Error::Shape(_))
        ));
        let mut same = LayerNorm::<f32>::new(3);
        assert!(restore_params(&h, tensors, "lm", &mut same).is_err());
    }

    #[test]
    fn checksum_tracks_values() {
        let a = sample();
        let mut b = sample();
        assert_eq!(param_checksum(&a), param_checksum(&b));
        b.beta.data_mut()[0] += 1e-3;
        assert_ne!(param_checksum(&a), param_checksum(&b));
        assert_eq!(param_checksum(&a).len(), 64);
    }
}
