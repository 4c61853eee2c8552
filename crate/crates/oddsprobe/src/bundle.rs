//! Tensor bundle: a directory holding `manifest.json` plus a single binary
//! blob of little-endian f64 values in row-major order. Round-trips are
//! bit-exact; the manifest records a SHA-256 checksum of the blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";
const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    blob: String,
    blob_sha256: String,
    entries: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset of the first element inside the blob.
    offset: u64,
    /// Number of f64 elements.
    count: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        use std::fmt::Write;
        let _ = write!(out, "{byte:02x}");
    }
    out
}

/// Writes the named tensors to `dir`, creating it if needed. Entries are
/// stored in the order given; names must be unique.
pub fn save_bundle(dir: &Path, tensors: &[(&str, &Tensor)]) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for (name, _) in tensors {
        if !seen.insert(*name) {
            return Err(Error::Artifact(format!("duplicate bundle entry '{name}'")));
        }
    }

    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, tensor) in tensors {
        let offset = blob.len() as u64;
        for value in tensor.data() {
            blob.extend_from_slice(&value.to_le_bytes());
        }
        entries.push(Entry {
            name: (*name).to_string(),
            shape: tensor.shape().to_vec(),
            dtype: "f64".to_string(),
            offset,
            count: tensor.len() as u64,
        });
    }

    let manifest = Manifest {
        version: BUNDLE_VERSION,
        blob: BLOB_FILE.to_string(),
        blob_sha256: sha256_hex(&blob),
        entries,
    };
    fs::write(dir.join(BLOB_FILE), &blob)?;
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Loads every tensor in the bundle, verifying the blob checksum and entry
/// bounds. Values are reconstructed bit-exactly.
pub fn load_bundle(dir: &Path) -> Result<BTreeMap<String, Tensor>> {
    let manifest_bytes = fs::read(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
    if manifest.version != BUNDLE_VERSION {
        return Err(Error::VersionMismatch {
            found: manifest.version,
            supported: BUNDLE_VERSION,
        });
    }
    let blob = fs::read(dir.join(&manifest.blob))?;
    let actual = sha256_hex(&blob);
    if actual != manifest.blob_sha256 {
        return Err(Error::ChecksumMismatch {
            what: format!("bundle blob {}", dir.display()),
            expected: manifest.blob_sha256,
            actual,
        });
    }

    let mut out = BTreeMap::new();
    for entry in &manifest.entries {
        if entry.dtype != "f64" {
            return Err(Error::Artifact(format!(
                "entry '{}' has unsupported dtype '{}'",
                entry.name, entry.dtype
            )));
        }
        let expected: usize = entry.shape.iter().product();
        if expected as u64 != entry.count {
            return Err(Error::Artifact(format!(
                "entry '{}': shape {:?} disagrees with count {}",
                entry.name, entry.shape, entry.count
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.count as usize * 8;
        if end > blob.len() {
            return Err(Error::Artifact(format!(
                "entry '{}' extends past the blob ({} > {})",
                entry.name,
                end,
                blob.len()
            )));
        }
        let mut data = Vec::with_capacity(entry.count as usize);
        for chunk in blob[start..end].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        let tensor = Tensor::new(entry.shape.clone(), data)?;
        if out.insert(entry.name.clone(), tensor).is_some() {
            return Err(Error::Artifact(format!(
                "duplicate bundle entry '{}'",
                entry.name
            )));
        }
    }
    Ok(out)
}

pub fn load_entry(dir: &Path, name: &str) -> Result<Tensor> {
    load_bundle(dir)?
        .remove(name)
        .ok_or_else(|| Error::Artifact(format!("bundle has no entry '{name}'")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        // Values chosen to exercise sign, subnormals and ulp-level detail.
        let a = Tensor::new(
            vec![2, 3],
            vec![0.1, -0.2, 1.0 + f64::EPSILON, 5e-324, -0.0, 3.5e300],
        )
        .unwrap();
        let b = Tensor::scalar(-7.25);
        save_bundle(dir.path(), &[("weights", &a), ("bias", &b)]).unwrap();
        let loaded = load_bundle(dir.path()).unwrap();
        assert_eq!(loaded.len(), 2);
        let la = &loaded["weights"];
        assert_eq!(la.shape(), a.shape());
        for (x, y) in la.data().iter().zip(a.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(loaded["bias"].item().unwrap(), -7.25);
    }

    #[test]
    fn corrupted_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::vector(vec![1.0, 2.0, 3.0]);
        save_bundle(dir.path(), &[("t", &t)]).unwrap();
        let blob_path = dir.path().join(BLOB_FILE);
        let mut blob = fs::read(&blob_path).unwrap();
        blob[3] ^= 0xff;
        fs::write(&blob_path, &blob).unwrap();
        match load_bundle(dir.path()) {
            Err(Error::ChecksumMismatch { .. }) => {}
            other => panic!("expected checksum mismatch, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::scalar(1.0);
        assert!(save_bundle(dir.path(), &[("x", &t), ("x", &t)]).is_err());
    }

    #[test]
    fn missing_entry_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(dir.path(), &[("x", &Tensor::scalar(1.0))]).unwrap();
        assert!(load_entry(dir.path(), "y").is_err());
        assert_eq!(load_entry(dir.path(), "x").unwrap().item().unwrap(), 1.0);
    }
}
