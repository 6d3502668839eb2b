//! Checkpoint directory: `manifest.json` describing every tensor plus
//! `weights.bin` holding their little-endian f32 bytes back to back.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const DTYPE: &str = "f32";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
    pub byte_len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    /// Which model the weights belong to, e.g. `tokenizer`.
    pub kind: String,
    pub config: serde_json::Value,
    pub params: Vec<Entry>,
}

impl Manifest {
    /// Checks version, dtypes, shapes and that byte ranges are in bounds and
    /// pairwise disjoint for a weights file of `file_len` bytes.
    pub fn validate(&self, file_len: u64) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::data(format!("unsupported checkpoint format_version {}", self.format_version)));
        }
        let mut ranges = Vec::with_capacity(self.params.len());
        for e in &self.params {
            if e.dtype != DTYPE {
                return Err(Error::data(format!("`{}`: unsupported dtype `{}`", e.name, e.dtype)));
            }
            let numel: u64 = e.shape.iter().map(|&d| d as u64).product();
            if numel * 4 != e.byte_len {
                return Err(Error::data(format!("`{}`: byte_len {} does not match shape {:?}", e.name, e.byte_len, e.shape)));
            }
            let end = e.byte_offset.checked_add(e.byte_len).filter(|&end| end <= file_len).ok_or_else(|| {
                Error::data(format!("`{}`: bytes {}+{} exceed weights file of {file_len} bytes", e.name, e.byte_offset, e.byte_len))
            })?;
            ranges.push((e.byte_offset, end, e.name.as_str()));
        }
        ranges.sort_unstable();
        for w in ranges.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::data(format!("`{}` and `{}` overlap in weights file", w[0].2, w[1].2)));
            }
        }
        let mut names: Vec<&str> = self.params.iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::data(format!("duplicate parameter `{}`", w[0])));
        }
        Ok(())
    }

    pub fn config_as<C: DeserializeOwned>(&self) -> Result<C> {
        serde_json::from_value(self.config.clone()).map_err(|e| Error::data(format!("checkpoint config: {e}")))
    }
}

/// Writes `params` and `config` to `dir`, creating it if needed.
pub fn save_checkpoint(dir: &Path, kind: &str, config: &impl Serialize, params: &ParamStore<f32>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::with_capacity(params.numel() * 4);
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        let offset = bytes.len() as u64;
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: DTYPE.into(),
            byte_offset: offset,
            byte_len: bytes.len() as u64 - offset,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: kind.into(),
        config: serde_json::to_value(config).map_err(|e| Error::data(format!("config: {e}")))?,
        params: entries,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::data(e.to_string()))?;
    fs::write(dir.join(WEIGHTS_FILE), bytes)?;
    fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))
}

/// Reads a checkpoint, validating the manifest against the weights file
/// before decoding any tensor.
pub fn load_checkpoint(dir: &Path) -> Result<(Manifest, ParamStore<f32>)> {
    let manifest = read_manifest(dir)?;
    let bytes = fs::read(dir.join(WEIGHTS_FILE))?;
    manifest.validate(bytes.len() as u64)?;
    let mut params = ParamStore::new();
    for e in &manifest.params {
        let raw = &bytes[e.byte_offset as usize..(e.byte_offset + e.byte_len) as usize];
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    Ok((manifest, params))
}

/// Loads a checkpoint of the given `kind` together with its typed config.
pub fn load_typed<C: DeserializeOwned>(dir: &Path, kind: &str) -> Result<(C, ParamStore<f32>)> {
    let (m, p) = load_checkpoint(dir)?;
    if m.kind != kind {
        return Err(Error::data(format!("{} holds a `{}` checkpoint, expected `{kind}`", dir.display(), m.kind)));
    }
    Ok((m.config_as()?, p))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut p = ParamStore::new();
        p.insert("a", Tensor::new(vec![2, 2], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]).unwrap());
        p.insert("b", Tensor::new(vec![3], vec![f32::EPSILON, 1e30, -7.25]).unwrap());
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), "test", &serde_json::json!({"k": 1}), &store()).unwrap();
        let (m, p) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(m.kind, "test");
        for ((_, x), (_, y)) in p.iter().zip(store().iter()) {
            let bx: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
            let by: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bx, by);
        }
    }

    #[test]
    fn truncated_and_overlapping_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), "test", &(), &store()).unwrap();
        let w = dir.path().join(WEIGHTS_FILE);
        let bytes = fs::read(&w).unwrap();
        fs::write(&w, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Data(_))));
        fs::write(&w, &bytes).unwrap();
        let mut m = read_manifest(dir.path()).unwrap();
        m.params[1].byte_offset = 4;
        assert!(matches!(m.validate(bytes.len() as u64), Err(Error::Data(_))));
    }
}
