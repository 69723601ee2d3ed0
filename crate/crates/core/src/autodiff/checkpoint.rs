//! Binary model checkpoints.
//!
//! Layout: an 8-byte magic string, a u32 format version, a length-prefixed
//! JSON header describing the payload (model kind, architecture metadata,
//! array directory), then the raw little-endian f64 arrays in directory
//! order. Weights round-trip bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TRJCKPT\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    arrays: Vec<ArrayInfo>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayInfo {
    name: String,
    rows: usize,
    cols: usize,
}

/// Writes `arrays` under a typed header. `kind` identifies the model family;
/// `meta` carries its architecture descriptor.
pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    meta: &impl Serialize,
    arrays: &[(String, &Tensor)],
) -> Result<()> {
    let header = Header {
        kind: kind.to_string(),
        meta: serde_json::to_value(meta)
            .map_err(|e| Error::Format(format!("cannot encode checkpoint meta: {e}")))?,
        arrays: arrays
            .iter()
            .map(|(name, t)| ArrayInfo { name: name.clone(), rows: t.rows(), cols: t.cols() })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("cannot encode checkpoint header: {e}")))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, t) in arrays {
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// A fully parsed checkpoint: kind, metadata, and named weight arrays.
#[derive(Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Decodes the metadata block into a concrete architecture type.
    pub fn meta_as<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.meta.clone())
            .map_err(|e| Error::Mismatch(format!("checkpoint meta does not decode: {e}")))
    }

    /// Removes and returns the named array, enforcing its shape.
    pub fn take_array(&mut self, name: &str, rows: usize, cols: usize) -> Result<Tensor> {
        let idx = self
            .arrays
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Mismatch(format!("checkpoint missing array {name:?}")))?;
        let (_, t) = self.arrays.remove(idx);
        if t.shape() != (rows, cols) {
            return Err(Error::Mismatch(format!(
                "array {name:?} has shape {:?}, expected ({rows}, {cols})",
                t.shape()
            )));
        }
        Ok(t)
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }

    let mut word = [0u8; 4];
    read_exact(&mut r, &mut word, "version")?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {FORMAT_VERSION}"
        )));
    }

    read_exact(&mut r, &mut word, "header length")?;
    let header_len = u32::from_le_bytes(word) as usize;
    let mut header_bytes = vec![0u8; header_len];
    read_exact(&mut r, &mut header_bytes, "header")?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Format(format!("corrupt checkpoint header: {e}")))?;

    let mut arrays = Vec::with_capacity(header.arrays.len());
    let mut buf = [0u8; 8];
    for info in &header.arrays {
        let mut data = Vec::with_capacity(info.rows * info.cols);
        for _ in 0..info.rows * info.cols {
            read_exact(&mut r, &mut buf, &info.name)?;
            data.push(f64::from_le_bytes(buf));
        }
        arrays.push((info.name.clone(), Tensor::from_vec(info.rows, info.cols, data)?));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint payload".into()));
    }

    Ok(Checkpoint { kind: header.kind, meta: header.meta, arrays })
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format(format!("checkpoint truncated while reading {what}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample_arrays() -> Vec<(String, Tensor)> {
        vec![
            (
                "w0".to_string(),
                Tensor::from_vec(2, 3, vec![1.0, -2.5, 3.25e-300, f64::MIN_POSITIVE, 0.0, -0.0])
                    .unwrap(),
            ),
            ("b0".to_string(), Tensor::row_vector(&[42.0, 1.0 / 3.0])),
        ]
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let arrays = sample_arrays();
        let refs: Vec<(String, &Tensor)> =
            arrays.iter().map(|(n, t)| (n.clone(), t)).collect();
        save_checkpoint(&path, "test-kind", &json!({"hidden": 64}), &refs).unwrap();

        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.kind, "test-kind");
        assert_eq!(loaded.meta, json!({"hidden": 64}));
        assert_eq!(loaded.arrays.len(), 2);
        for ((n0, t0), (n1, t1)) in arrays.iter().zip(&loaded.arrays) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            // Compare raw bits, not float equality (covers -0.0 and denormals).
            let bits0: Vec<u64> = t0.data().iter().map(|v| v.to_bits()).collect();
            let bits1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits0, bits1);
        }
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTMAGIC\x01\x00\x00\x00").unwrap();
        assert!(matches!(load_checkpoint(&path).unwrap_err(), Error::Format(_)));
    }

    #[test]
    fn wrong_version_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v9.ckpt");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&9u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version 9"));
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let arrays = sample_arrays();
        let refs: Vec<(String, &Tensor)> =
            arrays.iter().map(|(n, t)| (n.clone(), t)).collect();
        save_checkpoint(&path, "k", &json!({}), &refs).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 5]).unwrap();
        assert!(matches!(load_checkpoint(&path).unwrap_err(), Error::Format(_)));
    }

    #[test]
    fn trailing_garbage_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let arrays = sample_arrays();
        let refs: Vec<(String, &Tensor)> =
            arrays.iter().map(|(n, t)| (n.clone(), t)).collect();
        save_checkpoint(&path, "k", &json!({}), &refs).unwrap();
        let mut full = std::fs::read(&path).unwrap();
        full.push(0xAB);
        std::fs::write(&path, &full).unwrap();
        assert!(matches!(load_checkpoint(&path).unwrap_err(), Error::Format(_)));
    }

    #[test]
    fn take_array_checks_shape() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let arrays = sample_arrays();
        let refs: Vec<(String, &Tensor)> =
            arrays.iter().map(|(n, t)| (n.clone(), t)).collect();
        save_checkpoint(&path, "k", &json!({}), &refs).unwrap();
        let mut loaded = load_checkpoint(&path).unwrap();
        assert!(loaded.take_array("w0", 3, 2).is_err());
        let mut loaded = load_checkpoint(&path).unwrap();
        assert!(loaded.take_array("w0", 2, 3).is_ok());
        assert!(matches!(
            loaded.take_array("nope", 1, 1).unwrap_err(),
            Error::Mismatch(_)
        ));
    }
}
