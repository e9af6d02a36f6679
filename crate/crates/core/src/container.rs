//! Binary weight container.
//!
//! Layout, all integers little-endian:
//!
//! | bytes          | content                                          |
//! |----------------|--------------------------------------------------|
//! | 4              | magic `MSGW`                                     |
//! | 4              | format version, `u32`                            |
//! | 4              | manifest length `L` in bytes, `u32`              |
//! | L              | manifest, UTF-8 JSON                             |
//! | rest           | blob: concatenated `f64` little-endian values    |
//!
//! The manifest echoes the generator config, the wavelet subband order, the
//! demodulation mode of every separable layer, and one entry per parameter
//! (`name`, `shape`, byte `offset` into the blob, element count `len`).
//! Entries are sorted by name and packed without gaps, so the blob length
//! is exactly the sum of entry sizes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::GeneratorConfig;
use crate::error::{Error, Result};
use crate::modconv::DemodMode;
use crate::tensor::Tensor;
use crate::wavelet::SUBBAND_ORDER;

pub const MAGIC: &[u8; 4] = b"MSGW";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f64le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub config: GeneratorConfig,
    pub wavelet_subbands: Vec<String>,
    pub layers: BTreeMap<String, DemodMode>,
    pub entries: Vec<EntryMeta>,
    pub blob_len: u64,
}

/// Named parameters of one generator plus its config and layer modes.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightContainer {
    pub config: GeneratorConfig,
    /// Demodulation mode of every separable modulated convolution.
    pub layers: BTreeMap<String, DemodMode>,
    params: BTreeMap<String, Tensor>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Container(msg.into())
}

impl WeightContainer {
    pub fn new(config: GeneratorConfig) -> Self {
        Self {
            config,
            layers: BTreeMap::new(),
            params: BTreeMap::new(),
        }
    }

    /// Adds a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(bad(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, t);
        Ok(())
    }

    /// Adds or replaces a parameter.
    pub fn set(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.params.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| bad(format!("missing parameter `{name}`")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of stored scalars.
    pub fn scalar_count(&self) -> u64 {
        self.params.values().map(|t| t.len() as u64).sum()
    }

    pub fn manifest(&self) -> Manifest {
        let mut offset = 0u64;
        let entries = self
            .params
            .iter()
            .map(|(name, t)| {
                let e = EntryMeta {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                    len: t.len() as u64,
                };
                offset += 8 * t.len() as u64;
                e
            })
            .collect();
        Manifest {
            format_version: FORMAT_VERSION,
            dtype: DTYPE.to_string(),
            config: self.config.clone(),
            wavelet_subbands: SUBBAND_ORDER.iter().map(|s| s.to_string()).collect(),
            layers: self.layers.clone(),
            entries,
            blob_len: offset,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest()).expect("manifest serializes");
        let mut out = Vec::with_capacity(12 + manifest.len() + 8 * self.scalar_count() as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in self.params.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(bad("file too short for header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic, not an MSGW weight container"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() < mlen {
            return Err(bad("truncated manifest"));
        }
        let manifest: Manifest = serde_json::from_slice(&body[..mlen])?;
        let blob = &body[mlen..];
        if manifest.dtype != DTYPE {
            return Err(bad(format!("unsupported dtype `{}`", manifest.dtype)));
        }
        if manifest.wavelet_subbands != SUBBAND_ORDER {
            return Err(bad(format!(
                "wavelet subband order {:?} differs from {:?}",
                manifest.wavelet_subbands, SUBBAND_ORDER
            )));
        }
        if blob.len() as u64 != manifest.blob_len {
            return Err(bad(format!(
                "blob is {} bytes but the manifest declares {}",
                blob.len(),
                manifest.blob_len
            )));
        }
        let mut out = Self::new(manifest.config);
        out.layers = manifest.layers;
        let mut expected_offset = 0u64;
        for e in manifest.entries {
            let n: usize = e.shape.iter().product();
            if n as u64 != e.len || e.offset != expected_offset {
                return Err(bad(format!("entry `{}` has inconsistent shape/offset", e.name)));
            }
            let start = e.offset as usize;
            let end = start + 8 * n;
            if end > blob.len() {
                return Err(bad(format!("entry `{}` runs past the end of the blob", e.name)));
            }
            let data = blob[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            out.insert(e.name.clone(), Tensor::new(e.shape, data)?)?;
            expected_offset = end as u64;
        }
        if expected_offset != manifest.blob_len {
            return Err(bad("entry sizes do not add up to the blob length"));
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Bitwise parameter equality (config, modes, names, shapes, bits).
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.layers == other.layers
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }
}
