//! Single-file binary checkpoints.
//!
//! Layout:
//!
//! ```text
//! offset 0   magic "ZI2V" (4 bytes)
//! offset 4   format_version  u32 LE (currently 1)
//! offset 8   manifest_length u64 LE
//! offset 16  manifest: UTF-8 JSON, name -> {dtype, shape, byte_offset,
//!            byte_length, frozen}
//! payload    raw little-endian values; each tensor starts on a 64-byte
//!            boundary. byte_offset is relative to the payload base, which is
//!            the first 64-byte-aligned file offset at or after the manifest
//!            end (so offsets are independent of the manifest's own length
//!            and absolute positions stay 64-byte aligned).
//! ```
//!
//! The loader validates everything before touching the payload: magic,
//! version, manifest JSON, name grammar, dtype, length consistency against
//! the shape, alignment, in-bounds ranges, and pairwise non-overlap. A store
//! is homogeneous in dtype; mixed files are rejected. `load(save(store))` is
//! bit-identical, including frozen flags.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::tensor::{DType, Elem, Tensor};
use crate::weights::WeightStore;

pub const MAGIC: [u8; 4] = *b"ZI2V";
pub const FORMAT_VERSION: u32 = 1;
const ALIGN: u64 = 64;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    dtype: String,
    shape: Vec<u64>,
    byte_offset: u64,
    byte_length: u64,
    frozen: bool,
}

fn align_up(v: u64) -> u64 {
    v.div_ceil(ALIGN) * ALIGN
}

/// Serialize a store to the single-file format.
pub fn save_bytes<E: Elem>(store: &WeightStore<E>) -> Result<Vec<u8>> {
    let mut manifest: BTreeMap<String, ManifestEntry> = BTreeMap::new();
    let mut offset = 0u64;
    for (name, entry) in store.iter() {
        let byte_length = (entry.tensor.numel() * E::DTYPE.size_bytes()) as u64;
        manifest.insert(
            name.to_string(),
            ManifestEntry {
                dtype: E::DTYPE.name().to_string(),
                shape: entry.tensor.shape().iter().map(|&d| d as u64).collect(),
                byte_offset: offset,
                byte_length,
                frozen: entry.frozen,
            },
        );
        offset = align_up(offset + byte_length);
    }
    let manifest_json =
        serde_json::to_vec(&manifest).map_err(|e| CheckpointError::Manifest(e.to_string()))?;

    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    if store.is_empty() {
        return Ok(out);
    }
    let payload_base = align_up(out.len() as u64);
    out.resize(payload_base as usize, 0);
    for (name, entry) in store.iter() {
        let m = &manifest[name];
        let abs = (payload_base + m.byte_offset) as usize;
        out.resize(abs, 0);
        for &v in entry.tensor.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

/// A loaded checkpoint; the dtype is whatever the file declares.
#[derive(Debug, Clone)]
pub enum LoadedStore {
    F32(WeightStore<f32>),
    F64(WeightStore<f64>),
}

impl LoadedStore {
    pub fn dtype(&self) -> DType {
        match self {
            LoadedStore::F32(_) => DType::F32,
            LoadedStore::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            LoadedStore::F32(s) => s.len(),
            LoadedStore::F64(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn validated_manifest(bytes: &[u8]) -> Result<(BTreeMap<String, ManifestEntry>, u64)> {
    if bytes.len() < 16 {
        return Err(CheckpointError::Truncated {
            section: "header",
            needed: 16,
            available: bytes.len() as u64,
        }
        .into());
    }
    if bytes[0..4] != MAGIC {
        return Err(CheckpointError::BadMagic(bytes[0..4].try_into().unwrap()).into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version).into());
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let manifest_end = 16u64.checked_add(mlen).ok_or(CheckpointError::Truncated {
        section: "manifest",
        needed: u64::MAX,
        available: bytes.len() as u64,
    })?;
    if manifest_end > bytes.len() as u64 {
        return Err(CheckpointError::Truncated {
            section: "manifest",
            needed: manifest_end,
            available: bytes.len() as u64,
        }
        .into());
    }
    let manifest: BTreeMap<String, ManifestEntry> =
        serde_json::from_slice(&bytes[16..manifest_end as usize])
            .map_err(|e| CheckpointError::Manifest(e.to_string()))?;

    let payload_base = align_up(manifest_end);
    let mut ranges: Vec<(u64, u64, &str)> = Vec::with_capacity(manifest.len());
    for (name, entry) in &manifest {
        crate::weights::parse_name(name)?;
        let dtype = DType::parse(&entry.dtype)
            .ok_or_else(|| CheckpointError::UnknownDtype(entry.dtype.clone()))?;
        let mut numel: u64 = 1;
        for &d in &entry.shape {
            numel = numel.checked_mul(d).ok_or_else(|| {
                CheckpointError::Manifest(format!("`{name}`: shape product overflows"))
            })?;
        }
        let expected = numel
            .checked_mul(dtype.size_bytes() as u64)
            .ok_or_else(|| CheckpointError::Manifest(format!("`{name}`: byte length overflows")))?;
        if expected != entry.byte_length {
            return Err(CheckpointError::LengthMismatch {
                name: name.clone(),
                expected,
                declared: entry.byte_length,
            }
            .into());
        }
        if entry.byte_offset % ALIGN != 0 {
            return Err(CheckpointError::Manifest(format!(
                "`{name}`: byte_offset {} is not 64-byte aligned",
                entry.byte_offset
            ))
            .into());
        }
        let end = entry
            .byte_offset
            .checked_add(entry.byte_length)
            .and_then(|e| e.checked_add(payload_base))
            .ok_or_else(|| CheckpointError::OutOfBounds { name: name.clone() })?;
        if end > bytes.len() as u64 {
            return Err(CheckpointError::OutOfBounds { name: name.clone() }.into());
        }
        if entry.byte_length > 0 {
            ranges.push((
                entry.byte_offset,
                entry.byte_offset + entry.byte_length,
                name,
            ));
        }
    }
    ranges.sort_unstable();
    for pair in ranges.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(CheckpointError::Overlap {
                a: pair[0].2.to_string(),
                b: pair[1].2.to_string(),
            }
            .into());
        }
    }
    let dtypes: std::collections::BTreeSet<&str> =
        manifest.values().map(|e| e.dtype.as_str()).collect();
    if dtypes.len() > 1 {
        return Err(CheckpointError::MixedDtype.into());
    }
    Ok((manifest, payload_base))
}

fn read_store<E: Elem>(
    bytes: &[u8],
    manifest: &BTreeMap<String, ManifestEntry>,
    payload_base: u64,
) -> Result<WeightStore<E>> {
    let esz = E::DTYPE.size_bytes();
    let mut store = WeightStore::new();
    for (name, entry) in manifest {
        let numel = entry.byte_length as usize / esz;
        let start = (payload_base + entry.byte_offset) as usize;
        let data: Vec<E> = (0..numel)
            .map(|i| E::read_le(&bytes[start + i * esz..]))
            .collect();
        let shape: Vec<usize> = entry.shape.iter().map(|&d| d as usize).collect();
        store.insert(name, Tensor::new(shape, data)?, entry.frozen)?;
    }
    Ok(store)
}

/// Parse and validate a checkpoint. The dtype comes from the manifest; an
/// empty store loads as 32-bit.
pub fn load_bytes(bytes: &[u8]) -> Result<LoadedStore> {
    let (manifest, payload_base) = validated_manifest(bytes)?;
    let dtype = manifest
        .values()
        .next()
        .map(|e| DType::parse(&e.dtype).expect("validated"))
        .unwrap_or(DType::F32);
    Ok(match dtype {
        DType::F32 => LoadedStore::F32(read_store(bytes, &manifest, payload_base)?),
        DType::F64 => LoadedStore::F64(read_store(bytes, &manifest, payload_base)?),
    })
}

/// Load requiring a specific element type.
pub fn load_bytes_as<E: Elem>(bytes: &[u8]) -> Result<WeightStore<E>> {
    let (manifest, payload_base) = validated_manifest(bytes)?;
    if let Some(entry) = manifest.values().next() {
        if entry.dtype != E::DTYPE.name() {
            return Err(Error::Data(format!(
                "checkpoint holds {} tensors but {} was requested",
                entry.dtype,
                E::DTYPE.name()
            )));
        }
    }
    read_store(bytes, &manifest, payload_base)
}

pub fn save_checkpoint<E: Elem>(store: &WeightStore<E>, path: &Path) -> Result<()> {
    std::fs::write(path, save_bytes(store)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedStore> {
    load_bytes(&std::fs::read(path)?)
}
