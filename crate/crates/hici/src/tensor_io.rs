//! Named tensors as a JSON manifest plus one little-endian blob.
//!
//! The layout is described in `docs/tensor-format.md`.

use std::fs;
use std::path::{Path, PathBuf};

use hici_core::Tensor;
use serde::{Deserialize, Serialize};

pub const FORMAT: &str = "hici-tensors";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    F32,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Self::F64 => 8,
            Self::F32 => 4,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f64" => Some(Self::F64),
            "f32" => Some(Self::F32),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub tensors: Vec<Entry>,
}

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("bad tensor file: {0}")]
    Format(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Serialises tensors in order, packed without padding.
pub fn encode(tensors: &[(String, Tensor)], dtype: Dtype, blob: &str) -> (Manifest, Vec<u8>) {
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let offset = bytes.len() as u64;
        for &x in t.data() {
            match dtype {
                Dtype::F64 => bytes.extend_from_slice(&x.to_le_bytes()),
                Dtype::F32 => bytes.extend_from_slice(&(x as f32).to_le_bytes()),
            }
        }
        entries.push(Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype,
            offset,
            nbytes: bytes.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        blob: blob.into(),
        tensors: entries,
    };
    (manifest, bytes)
}

pub fn decode(manifest: &Manifest, blob: &[u8]) -> Result<Vec<(String, Tensor)>, IoError> {
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(IoError::Format(format!(
            "expected {FORMAT} v{VERSION}, found {} v{}",
            manifest.format, manifest.version
        )));
    }
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let count: usize = e.shape.iter().product();
        let size = e.dtype.size();
        if e.nbytes != (count * size) as u64 {
            return Err(IoError::Format(format!(
                "{}: {} bytes for shape {:?}",
                e.name, e.nbytes, e.shape
            )));
        }
        let start = usize::try_from(e.offset).map_err(|_| IoError::Format(e.name.clone()))?;
        let raw = blob
            .get(start..start + count * size)
            .ok_or_else(|| IoError::Format(format!("{}: outside the blob", e.name)))?;
        let data = match e.dtype {
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        };
        let t = Tensor::new(&e.shape, data).map_err(|err| IoError::Format(err.to_string()))?;
        out.push((e.name.clone(), t));
    }
    Ok(out)
}

/// Writes `<dir>/<stem>.json` and `<dir>/<stem>.bin`; returns the manifest path.
pub fn save(
    dir: &Path,
    stem: &str,
    tensors: &[(String, Tensor)],
    dtype: Dtype,
) -> Result<PathBuf, IoError> {
    let blob_name = format!("{stem}.bin");
    let (manifest, bytes) = encode(tensors, dtype, &blob_name);
    let blob_path = dir.join(&blob_name);
    fs::write(&blob_path, bytes).map_err(io_err(&blob_path))?;
    let path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(path)
}

pub fn load(manifest_path: &Path) -> Result<Vec<(String, Tensor)>, IoError> {
    let text = fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    if manifest.blob.contains(['/', '\\']) {
        return Err(IoError::Format(format!(
            "blob {:?} must be a bare file name",
            manifest.blob
        )));
    }
    let blob_path = manifest_path
        .parent()
        .unwrap_or(Path::new("."))
        .join(&manifest.blob);
    let blob = fs::read(&blob_path).map_err(io_err(&blob_path))?;
    decode(&manifest, &blob)
}
