//! `.fqc` checkpoint files.
//!
//! Layout: the 4 magic bytes `FQC1`, a little-endian `u32` header length, a
//! UTF-8 JSON header (architecture, tensor index, metadata), then the
//! payload of little-endian `f32` values in index order. Tensor offsets in
//! the index are relative to the start of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::arch::ArchitectureSpec;
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FQC1";
const PREFIX_LEN: usize = MAGIC.len() + 4;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: Option<u64>,
    pub epoch: Option<usize>,
    /// RFC 3339 creation time. Training leaves this unset so that repeated
    /// runs produce identical bytes.
    pub created_at: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    arch: ArchitectureSpec,
    tensors: Vec<IndexEntry>,
    metadata: CheckpointMeta,
}

/// Serializes `params` into checkpoint bytes.
pub fn encode_checkpoint<T: Scalar>(
    params: &ModelParams<T>,
    arch: &ArchitectureSpec,
    meta: &CheckpointMeta,
) -> Result<Vec<u8>> {
    let named = params.named_tensors(arch)?;
    let mut offset = 0u64;
    let tensors = named
        .iter()
        .map(|(name, t)| {
            let e = IndexEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                count: t.len(),
            };
            offset += 4 * t.len() as u64;
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        arch: arch.clone(),
        tensors,
        metadata: meta.clone(),
    })?;
    let header_len = u32::try_from(header.len())
        .map_err(|_| Error::Config("checkpoint header exceeds 4 GiB".into()))?;
    let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in &named {
        for v in t.data() {
            out.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses checkpoint bytes, validating the index against the architecture.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(ModelParams<T>, ArchitectureSpec, CheckpointMeta)> {
    let format = |offset: usize, message: String| Error::Format {
        offset: offset as u64,
        message,
    };
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(format(0, "missing FQC1 magic bytes".into()));
    }
    if bytes.len() < PREFIX_LEN {
        return Err(format(
            MAGIC.len(),
            format!("expected a 4-byte header length, found {} bytes", bytes.len() - MAGIC.len()),
        ));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let payload_start = PREFIX_LEN + header_len;
    if bytes.len() < payload_start {
        return Err(format(
            PREFIX_LEN,
            format!(
                "header truncated: expected {header_len} bytes, found {}",
                bytes.len() - PREFIX_LEN
            ),
        ));
    }
    let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..payload_start])
        .map_err(|e| format(PREFIX_LEN, format!("invalid header JSON: {e}")))?;

    let (shapes, _) = header
        .arch
        .param_shapes()
        .map_err(|e| Error::Consistency(format!("architecture in header is invalid: {e}")))?;
    if shapes.len() != header.tensors.len() {
        return Err(Error::Consistency(format!(
            "architecture needs {} tensors, index lists {}",
            shapes.len(),
            header.tensors.len()
        )));
    }
    let mut expected_offset = 0u64;
    for (p, e) in shapes.iter().zip(&header.tensors) {
        if p.name != e.name || p.shape != e.shape || e.count != p.shape.iter().product::<usize>() {
            return Err(Error::Consistency(format!(
                "index entry {} {:?} (count {}) does not match architecture tensor {} {:?}",
                e.name, e.shape, e.count, p.name, p.shape
            )));
        }
        if e.offset != expected_offset {
            return Err(format(
                PREFIX_LEN,
                format!("tensor {} at payload offset {}, expected {expected_offset}", e.name, e.offset),
            ));
        }
        expected_offset += 4 * e.count as u64;
    }
    let payload = &bytes[payload_start..];
    if payload.len() as u64 != expected_offset {
        return Err(format(
            payload_start,
            format!(
                "payload length mismatch: expected {expected_offset} bytes, found {}",
                payload.len()
            ),
        ));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let start = e.offset as usize;
        let data = payload[start..start + 4 * e.count]
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        tensors.push(Tensor::new(e.shape.clone(), data)?.with_grad());
    }
    let params = ModelParams::from_tensors(&header.arch, tensors)?;
    Ok((params, header.arch, header.metadata))
}

pub fn save_checkpoint<T: Scalar>(
    params: &ModelParams<T>,
    arch: &ArchitectureSpec,
    meta: &CheckpointMeta,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(params, arch, meta)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(ModelParams<T>, ArchitectureSpec, CheckpointMeta)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_reduced_arch;

    fn sample() -> (ModelParams<f32>, ArchitectureSpec) {
        let arch = build_reduced_arch(8).unwrap();
        (ModelParams::init(&arch, 42).unwrap(), arch)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (p, arch) = sample();
        let meta = CheckpointMeta { seed: Some(42), epoch: Some(3), created_at: None };
        let bytes = encode_checkpoint(&p, &arch, &meta).unwrap();
        let (q, arch2, meta2) = decode_checkpoint::<f32>(&bytes).unwrap();
        assert_eq!(arch2, arch);
        assert_eq!(meta2, meta);
        for (a, b) in p.tensors().iter().zip(q.tensors()) {
            let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(encode_checkpoint(&q, &arch2, &meta2).unwrap(), bytes);
    }

    #[test]
    fn wrong_magic() {
        let (p, arch) = sample();
        let mut bytes = encode_checkpoint(&p, &arch, &CheckpointMeta::default()).unwrap();
        bytes[0] = b'X';
        match decode_checkpoint::<f32>(&bytes).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, 0),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn truncated_payload_names_lengths() {
        let (p, arch) = sample();
        let bytes = encode_checkpoint(&p, &arch, &CheckpointMeta::default()).unwrap();
        let expected = 4 * p.num_parameters();
        let err = decode_checkpoint::<f32>(&bytes[..bytes.len() - 1]).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Format { .. }));
        assert!(
            msg.contains(&format!("expected {expected}")) && msg.contains(&format!("found {}", expected - 1)),
            "{msg}"
        );
    }

    #[test]
    fn truncated_header() {
        let (p, arch) = sample();
        let bytes = encode_checkpoint(&p, &arch, &CheckpointMeta::default()).unwrap();
        assert!(matches!(
            decode_checkpoint::<f32>(&bytes[..20]).unwrap_err(),
            Error::Format { offset: 8, .. }
        ));
        assert!(matches!(
            decode_checkpoint::<f32>(&bytes[..6]).unwrap_err(),
            Error::Format { offset: 4, .. }
        ));
    }

    #[test]
    fn mismatched_params_are_rejected() {
        let (p, _) = sample();
        let other = build_reduced_arch(4).unwrap();
        assert!(matches!(
            encode_checkpoint(&p, &other, &CheckpointMeta::default()).unwrap_err(),
            Error::Consistency(_)
        ));
    }
}
