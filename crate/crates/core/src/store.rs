//! Directory of CGTN files indexed by a JSON manifest, with per-file SHA-256.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{IntTensor, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn entry_for(name: &str, shape: &[usize], bytes: &[u8]) -> FileEntry {
    FileEntry {
        name: name.to_string(),
        file: format!("{name}.cgtn"),
        shape: shape.to_vec(),
        sha256: sha256_hex(bytes),
    }
}

pub fn write_tensor(dir: &Path, name: &str, t: &Tensor) -> Result<FileEntry> {
    let bytes = t.to_cgtn_bytes();
    let entry = entry_for(name, t.shape(), &bytes);
    std::fs::write(dir.join(&entry.file), bytes)?;
    Ok(entry)
}

pub fn write_int_tensor(dir: &Path, name: &str, t: &IntTensor) -> Result<FileEntry> {
    let bytes = t.to_cgtn_bytes();
    let entry = entry_for(name, &t.shape, &bytes);
    std::fs::write(dir.join(&entry.file), bytes)?;
    Ok(entry)
}

fn read_verified(dir: &Path, entry: &FileEntry) -> Result<Vec<u8>> {
    let path = dir.join(&entry.file);
    let bytes = std::fs::read(&path)?;
    let digest = sha256_hex(&bytes);
    if digest != entry.sha256 {
        return Err(Error::Integrity {
            path,
            reason: format!("sha256 {digest} does not match manifest {}", entry.sha256),
        });
    }
    Ok(bytes)
}

fn check_shape(dir: &Path, entry: &FileEntry, shape: &[usize]) -> Result<()> {
    if shape != entry.shape.as_slice() {
        return Err(Error::Integrity {
            path: dir.join(&entry.file),
            reason: format!("shape {shape:?} does not match manifest {:?}", entry.shape),
        });
    }
    Ok(())
}

pub fn read_tensor(dir: &Path, entry: &FileEntry) -> Result<Tensor> {
    let bytes = read_verified(dir, entry)?;
    let t = Tensor::read_cgtn(bytes.as_slice())?;
    check_shape(dir, entry, t.shape())?;
    Ok(t)
}

pub fn read_int_tensor(dir: &Path, entry: &FileEntry) -> Result<IntTensor> {
    let bytes = read_verified(dir, entry)?;
    let t = IntTensor::read_cgtn(bytes.as_slice())?;
    check_shape(dir, entry, &t.shape)?;
    Ok(t)
}

pub fn find<'a>(entries: &'a [FileEntry], name: &str) -> Result<&'a FileEntry> {
    entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::Format(format!("manifest has no tensor named {name:?}")))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&s)?)
}
