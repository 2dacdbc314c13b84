//! Named tensor collections and their on-disk form.
//!
//! A weight file is a pair: `<stem>.manifest.json` listing each tensor's
//! name, shape and byte offset, and `<stem>.bin` holding the concatenated
//! little-endian `f64` data in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT: &str = "tbava-weights-v1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedTensors {
    entries: Vec<(String, Tensor)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

impl NamedTensors {
    pub fn push(&mut self, name: String, t: Tensor) {
        self.entries.push((name, t));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Takes the tensor named `name`, checking its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::Data(format!("missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(Error::Data(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t.clone())
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.entries.iter().flat_map(|(_, t)| t.to_le_bytes()).collect()
    }

    /// Digest over names, shapes and data.
    pub fn sha256_hex(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update(name.as_bytes());
            h.update([0u8]);
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            h.update(t.to_le_bytes());
        }
        format!("{:x}", h.finalize())
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut offset = 0u64;
        let tensors = self
            .entries
            .iter()
            .map(|(name, t)| {
                let e = ManifestEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += (t.numel() * 8) as u64;
                e
            })
            .collect();
        let manifest = Manifest {
            format: FORMAT.into(),
            tensors,
        };
        let (mpath, bpath) = paths(stem);
        if let Some(dir) = mpath.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
        fs::write(&bpath, self.to_le_bytes()).map_err(|e| Error::io(&bpath, e))?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<NamedTensors> {
        let (mpath, bpath) = paths(stem);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", mpath.display())))?;
        if manifest.format != FORMAT {
            return Err(Error::Data(format!("unsupported weight format {:?}", manifest.format)));
        }
        let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        let mut out = NamedTensors::default();
        for entry in manifest.tensors {
            let n: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start + n * 8;
            let raw = bytes.get(start..end).ok_or_else(|| {
                Error::Data(format!("tensor {} runs past end of {}", entry.name, bpath.display()))
            })?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            out.push(entry.name, Tensor::new(entry.shape, data)?);
        }
        Ok(out)
    }
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    let s = stem.as_os_str().to_string_lossy();
    (PathBuf::from(format!("{s}.manifest.json")), PathBuf::from(format!("{s}.bin")))
}
