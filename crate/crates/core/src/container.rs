//! Binary tensor containers.
//!
//! Every container shares one little-endian framing:
//!
//! ```text
//! magic      [u8; 4]
//! version    u32      (currently 1)
//! manifest   u64 length, then that many bytes of UTF-8 JSON
//! data       raw f32 values, row-major
//! ```
//!
//! The adapter pack (`LPAK`) lists per-layer byte offsets into the data
//! section. The encoder (`LENC`) and toy-model (`LTOY`) containers use a named
//! tensor bundle; the gate (`LGAT`) and index (`LIDX`) containers have their
//! own manifests next to their types.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FormatError, Result};
use crate::lora::{LayerDelta, LoraAdapter};
use crate::tensor::Tensor;

pub const VERSION: u32 = 1;
pub const PACK_MAGIC: [u8; 4] = *b"LPAK";
pub const ENCODER_MAGIC: [u8; 4] = *b"LENC";
pub const INDEX_MAGIC: [u8; 4] = *b"LIDX";
pub const GATE_MAGIC: [u8; 4] = *b"LGAT";
pub const TOY_MAGIC: [u8; 4] = *b"LTOY";

const HEADER_LEN: usize = 4 + 4 + 8;

pub fn write_container(magic: [u8; 4], manifest: &[u8], payload: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + 4 * payload.len());
    out.extend_from_slice(&magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Splits a container into its manifest bytes and data section.
pub fn read_container(bytes: &[u8], magic: [u8; 4]) -> Result<(&[u8], &[u8]), FormatError> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated {
            needed: HEADER_LEN as u64,
            available: bytes.len() as u64,
        });
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if found != magic {
        return Err(FormatError::BadMagic {
            expected: magic,
            found,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated {
            needed: HEADER_LEN as u64,
            available: bytes.len() as u64,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(FormatError::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let available = (bytes.len() - HEADER_LEN) as u64;
    if manifest_len > available {
        return Err(FormatError::Truncated {
            needed: HEADER_LEN as u64 + manifest_len,
            available: bytes.len() as u64,
        });
    }
    let end = HEADER_LEN + manifest_len as usize;
    Ok((&bytes[HEADER_LEN..end], &bytes[end..]))
}

pub fn f32s_from_le(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect()
}

fn parse_manifest<T: for<'de> Deserialize<'de>>(bytes: &[u8]) -> Result<T, FormatError> {
    let text = std::str::from_utf8(bytes).map_err(|e| FormatError::Manifest(e.to_string()))?;
    serde_json::from_str(text).map_err(|e| FormatError::Manifest(e.to_string()))
}

/// Returns `data[offset..offset + 4·count]` or a truncation error.
fn slice_floats(data: &[u8], offset: u64, count: usize) -> Result<Vec<f32>, FormatError> {
    let len = 4 * count as u64;
    let end = offset
        .checked_add(len)
        .ok_or_else(|| FormatError::Manifest("offset overflow".into()))?;
    if end > data.len() as u64 {
        return Err(FormatError::Truncated {
            needed: end,
            available: data.len() as u64,
        });
    }
    if !offset.is_multiple_of(4) {
        return Err(FormatError::LengthMismatch(format!(
            "offset {offset} is not 4-byte aligned"
        )));
    }
    Ok(f32s_from_le(&data[offset as usize..end as usize]))
}

// ---------------------------------------------------------------------------
// Named tensor bundles

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleManifest {
    header: serde_json::Value,
    tensors: Vec<BundleEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn encode_bundle(
    magic: [u8; 4],
    header: serde_json::Value,
    tensors: &[(String, &Tensor)],
) -> Vec<u8> {
    let manifest = BundleManifest {
        header,
        tensors: tensors
            .iter()
            .map(|(n, t)| BundleEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).expect("serializable manifest");
    let payload: Vec<f32> = tensors.iter().flat_map(|(_, t)| t.to_f32_vec()).collect();
    write_container(magic, &json, &payload)
}

pub fn decode_bundle(
    bytes: &[u8],
    magic: [u8; 4],
) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let (manifest, data) = read_container(bytes, magic)?;
    let manifest: BundleManifest = parse_manifest(manifest)?;
    let mut offset = 0u64;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let n: usize = e.shape.iter().product();
        let vals = slice_floats(data, offset, n)?;
        offset += 4 * n as u64;
        let t = Tensor::from_f32(e.shape.clone(), &vals).map_err(|_| {
            FormatError::Shape(format!("tensor {} has invalid shape {:?}", e.name, e.shape))
        })?;
        out.push((e.name, t));
    }
    if offset != data.len() as u64 {
        return Err(FormatError::LengthMismatch(format!(
            "manifest describes {offset} data bytes, container holds {}",
            data.len()
        ))
        .into());
    }
    Ok((manifest.header, out))
}

// ---------------------------------------------------------------------------
// Adapter packs

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PackManifest {
    adapter_id: String,
    metadata: BTreeMap<String, String>,
    layers: Vec<PackLayer>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PackLayer {
    layer_id: String,
    d: usize,
    k: usize,
    r: usize,
    alpha: f64,
    b_offset: u64,
    a_offset: u64,
}

/// Serialises an adapter. Factors are stored as `f32`; adapters whose
/// entries are already `f32`-representable round-trip exactly.
pub fn encode_pack(adapter: &LoraAdapter) -> Result<Vec<u8>> {
    adapter.validate()?;
    let mut payload: Vec<f32> = Vec::new();
    let mut layers = Vec::with_capacity(adapter.layers.len());
    for l in &adapter.layers {
        let b_offset = 4 * payload.len() as u64;
        payload.extend(l.b.to_f32_vec());
        let a_offset = 4 * payload.len() as u64;
        payload.extend(l.a.to_f32_vec());
        layers.push(PackLayer {
            layer_id: l.layer_id.clone(),
            d: l.d,
            k: l.k,
            r: l.r,
            alpha: l.alpha,
            b_offset,
            a_offset,
        });
    }
    let manifest = PackManifest {
        adapter_id: adapter.adapter_id.clone(),
        metadata: adapter.metadata.clone(),
        layers,
    };
    Ok(write_container(
        PACK_MAGIC,
        &serde_json::to_vec(&manifest)?,
        &payload,
    ))
}

pub fn decode_pack(bytes: &[u8]) -> Result<LoraAdapter> {
    let (manifest, data) = read_container(bytes, PACK_MAGIC)?;
    let manifest: PackManifest = parse_manifest(manifest)?;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    let mut covered = 0u64;
    for l in &manifest.layers {
        let b = slice_floats(data, l.b_offset, l.d * l.r)?;
        let a = slice_floats(data, l.a_offset, l.r * l.k)?;
        covered = covered
            .max(l.b_offset + 4 * (l.d * l.r) as u64)
            .max(l.a_offset + 4 * (l.r * l.k) as u64);
        let b = Tensor::from_f32(vec![l.d, l.r], &b)
            .map_err(|_| FormatError::Shape(format!("layer {}: bad B shape", l.layer_id)))?;
        let a = Tensor::from_f32(vec![l.r, l.k], &a)
            .map_err(|_| FormatError::Shape(format!("layer {}: bad A shape", l.layer_id)))?;
        layers.push(LayerDelta {
            layer_id: l.layer_id.clone(),
            d: l.d,
            k: l.k,
            r: l.r,
            alpha: l.alpha,
            b,
            a,
        });
    }
    if covered != data.len() as u64 {
        return Err(FormatError::LengthMismatch(format!(
            "manifest covers {covered} data bytes, container holds {}",
            data.len()
        ))
        .into());
    }
    let adapter = LoraAdapter {
        adapter_id: manifest.adapter_id,
        layers,
        metadata: manifest.metadata,
    };
    adapter.validate()?;
    Ok(adapter)
}

pub fn save_pack(adapter: &LoraAdapter, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_pack(adapter)?)?;
    Ok(())
}

pub fn load_pack(path: impl AsRef<Path>) -> Result<LoraAdapter> {
    decode_pack(&std::fs::read(path)?)
}
