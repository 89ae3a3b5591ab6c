//! Named-tensor checkpoints and cross-architecture weight conversion.
//!
//! File layout: 8-byte magic, u32 version, u64 header length, JSON header
//! (entry names, dtypes, shapes, payload offsets, metadata), then one
//! contiguous little-endian payload. Tensor bytes round-trip exactly.
//!
//! Conversion moves weights between the plain-ViT-style schema (patch embed
//! reads the 3-channel image, no `frontend.*` entries) and the
//! frontend-equipped schema. Either way the patch embedding projection is
//! dropped — its input channel count differs — and going to the plain
//! schema additionally drops the frontend stack. Every surviving entry is
//! byte-identical to its source.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{Param, ParamStore};
use crate::tensor::{Dtype, Element};

const MAGIC: &[u8; 8] = b"CVFRCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: Vec<u8>,
}

impl CheckpointEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointMetadata {
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub epoch: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckpointBundle {
    entries: Vec<(String, CheckpointEntry)>,
    pub metadata: CheckpointMetadata,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CheckpointError {
    BadMagic,
    UnsupportedVersion { version: u32 },
    Header { detail: String },
    /// Payload ends inside this entry.
    Truncated { entry: String, expected: usize, got: usize },
    SizeMismatch { entry: String, detail: String },
    DuplicateName { name: String },
    Conversion { detail: String, names: Vec<String> },
    Io(String),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::BadMagic => write!(f, "not a checkpoint file (bad magic)"),
            CheckpointError::UnsupportedVersion { version } => {
                write!(f, "unsupported checkpoint version {version}")
            }
            CheckpointError::Header { detail } => write!(f, "bad checkpoint header: {detail}"),
            CheckpointError::Truncated { entry, expected, got } => {
                write!(f, "truncated payload at entry '{entry}': expected {expected} bytes, got {got}")
            }
            CheckpointError::SizeMismatch { entry, detail } => {
                write!(f, "entry '{entry}': {detail}")
            }
            CheckpointError::DuplicateName { name } => write!(f, "duplicate entry name '{name}'"),
            CheckpointError::Conversion { detail, names } => {
                write!(f, "conversion: {detail}")?;
                if !names.is_empty() {
                    write!(f, " [{}]", names.join(", "))?;
                }
                Ok(())
            }
            CheckpointError::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> Self {
        CheckpointError::Io(e.to_string())
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    entries: Vec<HeaderEntry>,
    #[serde(default)]
    metadata: CheckpointMetadata,
}

impl CheckpointBundle {
    pub fn new(metadata: CheckpointMetadata) -> Self {
        CheckpointBundle { entries: Vec::new(), metadata }
    }

    pub fn insert(
        &mut self,
        name: &str,
        dtype: Dtype,
        shape: Vec<usize>,
        data: Vec<u8>,
    ) -> Result<(), CheckpointError> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(CheckpointError::DuplicateName { name: name.to_string() });
        }
        let expected = shape.iter().product::<usize>() * dtype.size();
        if data.len() != expected {
            return Err(CheckpointError::SizeMismatch {
                entry: name.to_string(),
                detail: format!(
                    "{} bytes for shape {:?} of {} (expected {expected})",
                    data.len(),
                    shape,
                    dtype.name()
                ),
            });
        }
        self.entries.push((name.to_string(), CheckpointEntry { dtype, shape, data }));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &CheckpointEntry)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Snapshot every parameter of a store, in store order.
    pub fn from_params<T: Element>(
        store: &ParamStore<T>,
        metadata: CheckpointMetadata,
    ) -> Self {
        let mut bundle = CheckpointBundle::new(metadata);
        for (_, name, param) in store.iter() {
            let mut bytes = Vec::with_capacity(param.data.len() * T::DTYPE.size());
            for &v in &param.data {
                v.write_le_bytes(&mut bytes);
            }
            bundle
                .insert(name, T::DTYPE, param.shape.clone(), bytes)
                .expect("store names are unique");
        }
        bundle
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let header = Header {
            entries: self
                .entries
                .iter()
                .map(|(name, e)| {
                    let he = HeaderEntry {
                        name: name.clone(),
                        dtype: e.dtype.name().to_string(),
                        shape: e.shape.clone(),
                        offset,
                        nbytes: e.data.len(),
                    };
                    offset += e.data.len();
                    he
                })
                .collect(),
            metadata: self.metadata.clone(),
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header_json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        for (_, e) in &self.entries {
            out.extend_from_slice(&e.data);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 20 {
            return Err(CheckpointError::BadMagic);
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion { version });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        if header_len > bytes.len().saturating_sub(20) {
            return Err(CheckpointError::Header {
                detail: format!("header length {header_len} exceeds file"),
            });
        }
        let header: Header = serde_json::from_slice(&bytes[20..20 + header_len])
            .map_err(|e| CheckpointError::Header { detail: e.to_string() })?;
        let payload = &bytes[20 + header_len..];

        let mut bundle = CheckpointBundle::new(header.metadata);
        for he in header.entries {
            let dtype = Dtype::from_name(&he.dtype).ok_or_else(|| CheckpointError::Header {
                detail: format!("entry '{}': unknown dtype '{}'", he.name, he.dtype),
            })?;
            let numel: usize = he.shape.iter().product();
            if he.nbytes != numel * dtype.size() {
                return Err(CheckpointError::SizeMismatch {
                    entry: he.name,
                    detail: format!(
                        "{} bytes for shape {:?} of {}",
                        he.nbytes,
                        he.shape,
                        dtype.name()
                    ),
                });
            }
            let end = he.offset.checked_add(he.nbytes).ok_or_else(|| CheckpointError::Header {
                detail: format!("entry '{}': offset overflow", he.name),
            })?;
            if end > payload.len() {
                return Err(CheckpointError::Truncated {
                    entry: he.name,
                    expected: he.nbytes,
                    got: payload.len().saturating_sub(he.offset),
                });
            }
            bundle.insert(&he.name, dtype, he.shape, payload[he.offset..end].to_vec())?;
        }
        Ok(bundle)
    }

    /// Atomic save: write to a sibling temp file, then rename into place.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvertDirection {
    BaseToConviformer,
    ConviformerToBase,
}

impl ConvertDirection {
    pub fn parse(s: &str) -> Result<Self, CheckpointError> {
        match s {
            "base-to-conviformer" => Ok(ConvertDirection::BaseToConviformer),
            "conviformer-to-base" => Ok(ConvertDirection::ConviformerToBase),
            other => Err(CheckpointError::Conversion {
                detail: format!("unknown direction '{other}'"),
                names: vec![],
            }),
        }
    }
}

const PATCH_EMBED_NAMES: [&str; 2] = ["patch_embed.weight", "patch_embed.bias"];
const FRONTEND_PREFIX: &str = "frontend.";

/// Convert between schemas. Returns the new bundle and the dropped names,
/// in source order. Retained entries keep their exact bytes.
pub fn convert(
    bundle: &CheckpointBundle,
    direction: ConvertDirection,
) -> Result<(CheckpointBundle, Vec<String>), CheckpointError> {
    let frontend_names: Vec<String> = bundle
        .names()
        .filter(|n| n.starts_with(FRONTEND_PREFIX))
        .map(str::to_string)
        .collect();
    let missing_pe: Vec<String> = PATCH_EMBED_NAMES
        .iter()
        .filter(|n| bundle.get(n).is_none())
        .map(|n| n.to_string())
        .collect();
    if !missing_pe.is_empty() {
        return Err(CheckpointError::Conversion {
            detail: "bundle lacks the patch embedding projection".into(),
            names: missing_pe,
        });
    }

    let drop_set: Vec<String> = match direction {
        ConvertDirection::BaseToConviformer => {
            if !frontend_names.is_empty() {
                return Err(CheckpointError::Conversion {
                    detail: "source bundle already carries frontend weights".into(),
                    names: frontend_names,
                });
            }
            PATCH_EMBED_NAMES.iter().map(|n| n.to_string()).collect()
        }
        ConvertDirection::ConviformerToBase => {
            if frontend_names.is_empty() {
                return Err(CheckpointError::Conversion {
                    detail: "source bundle has no frontend weights to strip".into(),
                    names: vec![],
                });
            }
            let mut drops = frontend_names;
            drops.extend(PATCH_EMBED_NAMES.iter().map(|n| n.to_string()));
            drops
        }
    };

    let mut out = CheckpointBundle::new(bundle.metadata.clone());
    let mut dropped = Vec::new();
    for (name, e) in bundle.iter() {
        if drop_set.iter().any(|d| d == name) {
            dropped.push(name.to_string());
        } else {
            out.insert(name, e.dtype, e.shape.clone(), e.data.clone())?;
        }
    }
    Ok((out, dropped))
}

/// Result of loading a bundle into a parameter store: every name ends up in
/// exactly one list.
#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Store parameters absent from the bundle (left at their fresh init).
    pub fresh: Vec<String>,
    /// Bundle entries with no matching parameter.
    pub unmatched: Vec<String>,
}

/// Copy matching entries into the store by name. Shape or dtype conflicts
/// are errors naming the entry; absent entries leave the parameter at its
/// current (freshly initialized) value.
pub fn load_into_store<T: Element>(
    bundle: &CheckpointBundle,
    store: &mut ParamStore<T>,
) -> Result<LoadReport, CheckpointError> {
    let mut report = LoadReport::default();
    for (name, param) in store.iter_mut() {
        let Some(entry) = bundle.get(name) else {
            report.fresh.push(name.to_string());
            continue;
        };
        if entry.dtype != T::DTYPE {
            return Err(CheckpointError::SizeMismatch {
                entry: name.to_string(),
                detail: format!("dtype {} vs model {}", entry.dtype.name(), T::DTYPE.name()),
            });
        }
        if entry.shape != param.shape {
            return Err(CheckpointError::SizeMismatch {
                entry: name.to_string(),
                detail: format!("shape {:?} vs model {:?}", entry.shape, param.shape),
            });
        }
        let step = T::DTYPE.size();
        param.data = entry.data.chunks_exact(step).map(T::read_le_bytes).collect();
        report.loaded.push(name.to_string());
    }
    for name in bundle.names() {
        if store.find(name).is_none() {
            report.unmatched.push(name.to_string());
        }
    }
    Ok(report)
}

/// Store snapshot for `Param` consumers that need typed data back.
pub fn entry_as_vec<T: Element>(entry: &CheckpointEntry) -> Vec<T> {
    entry.data.chunks_exact(T::DTYPE.size()).map(T::read_le_bytes).collect()
}

/// Convenience for tests: a `Param`-shaped view of an entry.
pub fn entry_as_param<T: Element>(entry: &CheckpointEntry) -> Param<T> {
    Param { data: entry_as_vec(entry), shape: entry.shape.clone() }
}
