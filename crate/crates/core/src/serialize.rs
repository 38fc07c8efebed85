//! Flat little-endian `f32` tensor files with a TOML manifest.
//!
//! `<stem>.bin` holds every tensor back to back; `<stem>.manifest.toml`
//! records name, shape and byte offset of each, plus free-form metadata.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub const FORMAT: &str = "f32le-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the `.bin` file.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<ManifestEntry>,
}

pub fn encode(tensors: &[(String, &Tensor)]) -> (Vec<ManifestEntry>, Vec<u8>) {
    let mut bytes = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: bytes.len(),
        });
        for &v in t.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    (entries, bytes)
}

pub fn decode(entries: &[ManifestEntry], bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    entries
        .iter()
        .map(|e| {
            let n = numel(&e.shape);
            let end = e.offset + 4 * n;
            let raw = bytes
                .get(e.offset..end)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past the end of the data file", e.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            Ok((e.name.clone(), Tensor::new(e.shape.clone(), data)))
        })
        .collect()
}

pub fn write(dir: &Path, stem: &str, tensors: &[(String, &Tensor)], meta: BTreeMap<String, String>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (entries, bytes) = encode(tensors);
    let manifest = Manifest {
        format: FORMAT.to_string(),
        meta,
        entries,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(dir.join(format!("{stem}.bin")), bytes)?;
    fs::write(dir.join(format!("{stem}.manifest.toml")), text)?;
    Ok(())
}

pub fn read(dir: &Path, stem: &str) -> Result<(Manifest, Vec<(String, Tensor)>)> {
    let mpath = dir.join(format!("{stem}.manifest.toml"));
    let text =
        fs::read_to_string(&mpath).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", mpath.display())))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format {}", manifest.format)));
    }
    let bytes = fs::read(dir.join(format!("{stem}.bin")))?;
    let tensors = decode(&manifest.entries, &bytes)?;
    Ok((manifest, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let a = Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-3, 7.0]);
        let b = Tensor::scalar(0.5);
        let mut meta = BTreeMap::new();
        meta.insert("k".into(), "v".into());
        write(dir.path(), "w", &[("a".into(), &a), ("b".into(), &b)], meta.clone()).unwrap();
        let (m, ts) = read(dir.path(), "w").unwrap();
        assert_eq!(m.meta, meta);
        assert_eq!(m.entries[1].offset, 24);
        assert_eq!(ts[0].1.max_abs_diff(&a), (1e-3f64 - (1e-3f32) as f64).abs());
        assert_eq!(ts[1].1, b);
    }

    #[test]
    fn truncated_data_is_rejected() {
        let a = Tensor::zeros(&[4]);
        let (entries, bytes) = encode(&[("a".into(), &a)]);
        assert!(decode(&entries, &bytes[..8]).is_err());
    }
}
