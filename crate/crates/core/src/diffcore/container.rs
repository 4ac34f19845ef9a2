//! Binary parameter container.
//!
//! Layout: 8-byte magic `GOBLCKPT`, a little-endian `u64` header length, the
//! UTF-8 JSON header, then every tensor's little-endian `f64` payload in
//! header order. `byte_offset` is relative to the start of the payload block.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ModuleTag, NdArray, ParamRegistry};

pub const MAGIC: &[u8; 8] = b"GOBLCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic bytes (not a GOBLCKPT container)")]
    BadMagic,
    #[error("unsupported container version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("container truncated: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("invalid header: {0}")]
    Header(String),
    #[error("unsupported dtype {0:?} for tensor {1}")]
    Dtype(String, String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
    pub module_tag: ModuleTag,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub version: u32,
    pub tensors: Vec<TensorRecord>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn encode(registry: &ParamRegistry, metadata: serde_json::Value) -> Vec<u8> {
    let mut offset = 0u64;
    let tensors = registry
        .iter()
        .map(|(name, e)| {
            let rec = TensorRecord {
                name: name.to_string(),
                shape: e.value.shape().to_vec(),
                dtype: "f64".into(),
                byte_offset: offset,
                module_tag: e.tag,
                frozen: e.frozen,
            };
            offset += 8 * e.value.len() as u64;
            rec
        })
        .collect();
    let header = ContainerHeader {
        version: FORMAT_VERSION,
        tensors,
        metadata,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, e) in registry.iter() {
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(ParamRegistry, serde_json::Value), ContainerError> {
    let need = |n: usize| {
        if bytes.len() < n {
            Err(ContainerError::Truncated {
                needed: n,
                found: bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    need(8)?;
    if &bytes[..8] != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    need(16)?;
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let payload_start = 16usize
        .checked_add(header_len)
        .ok_or_else(|| ContainerError::Header("header length overflow".into()))?;
    need(payload_start)?;
    let header: ContainerHeader =
        serde_json::from_slice(&bytes[16..payload_start]).map_err(|e| ContainerError::Header(e.to_string()))?;
    if header.version != FORMAT_VERSION {
        return Err(ContainerError::Version { found: header.version });
    }
    let mut registry = ParamRegistry::new();
    let mut expected_offset = 0u64;
    for rec in &header.tensors {
        if rec.dtype != "f64" {
            return Err(ContainerError::Dtype(rec.dtype.clone(), rec.name.clone()));
        }
        if rec.byte_offset != expected_offset {
            return Err(ContainerError::Header(format!(
                "tensor {} at offset {} (expected {expected_offset})",
                rec.name, rec.byte_offset
            )));
        }
        let count: usize = rec.shape.iter().product();
        let start = payload_start + rec.byte_offset as usize;
        let end = start + 8 * count;
        need(end)?;
        let data = bytes[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let value = NdArray::new(rec.shape.clone(), data).map_err(|e| ContainerError::Header(e.to_string()))?;
        registry
            .insert(&rec.name, value, rec.module_tag, rec.frozen)
            .map_err(|e| ContainerError::Header(e.to_string()))?;
        expected_offset += 8 * count as u64;
    }
    let total = payload_start + expected_offset as usize;
    if bytes.len() != total {
        return Err(ContainerError::Header(format!(
            "{} trailing bytes after payload",
            bytes.len().saturating_sub(total)
        )));
    }
    Ok((registry, header.metadata))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamRegistry {
        let mut r = ParamRegistry::new();
        r.register(
            "a",
            NdArray::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap(),
            ModuleTag::Fusion,
        )
        .unwrap();
        r.register("b", NdArray::vector(vec![0.1; 3]), ModuleTag::Decoder)
            .unwrap();
        r.get_mut("b").unwrap().frozen = true;
        r
    }

    #[test]
    fn round_trip_is_bitwise() {
        let r = sample();
        let bytes = encode(&r, serde_json::json!({"phase": "pretrain"}));
        assert_eq!(&bytes[..8], b"GOBLCKPT");
        let (back, meta) = decode(&bytes).unwrap();
        assert!(back.values_bitwise_eq(&r, None));
        assert!(back.get("b").unwrap().frozen);
        assert_eq!(back.get("a").unwrap().tag, ModuleTag::Fusion);
        assert_eq!(encode(&back, meta), bytes);
    }

    #[test]
    fn truncation_and_magic_are_detected() {
        let bytes = encode(&sample(), serde_json::Value::Null);
        for cut in [0, 5, 12, 20, bytes.len() - 1] {
            assert!(decode(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(ContainerError::BadMagic)));
    }

    #[test]
    fn version_mismatch_is_detected() {
        let bytes = encode(&sample(), serde_json::Value::Null);
        let needle = b"\"version\":1";
        let at = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
        let mut forged = bytes.clone();
        forged[at + needle.len() - 1] = b'7';
        assert!(matches!(decode(&forged), Err(ContainerError::Version { found: 7 })));
    }
}
