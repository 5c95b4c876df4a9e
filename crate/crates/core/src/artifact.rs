//! On-disk formats shared by the library and the CLI.
//!
//! Binary matrix files are laid out as
//!
//! ```text
//! b"GRIDDPP\0" | u32 LE header length | JSON header | f64 LE payload
//! ```
//!
//! The header always carries `"shape": [rows, cols]`; everything else
//! (hashes, configs, epochs) is free-form JSON chosen by the writer.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"GRIDDPP\0";

/// Hex SHA-256 of the compact JSON serialisation of `value`.
///
/// serde_json emits struct fields in declaration order and maps in key
/// order, so the digest is stable for a given value.
pub fn hash_json<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serialisable value");
    hash_bytes(&bytes)
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` to `path` via a sibling temporary file and a rename, so a
/// reader never observes a partially written artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let file_name = path.file_name().and_then(|s| s.to_str()).unwrap_or("artifact");
    let tmp = path.with_file_name(format!(".{file_name}.tmp"));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::Artifact(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Encodes a list of named tensors into one blob. The header gains
/// `"tensors": [{"name", "shape"}...]` and a `"shape"` equal to the first tensor's.
pub fn encode_tensors(mut header: Value, tensors: &[(&str, &Tensor)]) -> Result<Vec<u8>> {
    let obj = header.as_object_mut().ok_or_else(|| Error::Artifact("matrix header must be a JSON object".into()))?;
    let listing: Vec<Value> =
        tensors.iter().map(|(name, t)| serde_json::json!({ "name": name, "shape": [t.rows(), t.cols()] })).collect();
    let first = tensors.first().map_or([0, 0], |(_, t)| [t.rows(), t.cols()]);
    obj.insert("shape".into(), serde_json::json!(first));
    obj.insert("tensors".into(), Value::Array(listing));
    let header_bytes = serde_json::to_vec(&header)?;
    let payload: usize = tensors.iter().map(|(_, t)| t.len()).sum();
    let mut out = Vec::with_capacity(12 + header_bytes.len() + payload * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, t) in tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub struct TensorFile {
    pub header: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<TensorFile> {
    let bad = |m: &str| Error::Artifact(format!("malformed matrix file: {m}"));
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header_end = 12 + hlen;
    if bytes.len() < header_end {
        return Err(bad("truncated header"));
    }
    let header: Value = serde_json::from_slice(&bytes[12..header_end])?;
    let listing =
        header.get("tensors").and_then(Value::as_array).ok_or_else(|| bad("header lacks tensor listing"))?.clone();
    let mut offset = header_end;
    let mut tensors = Vec::with_capacity(listing.len());
    for entry in listing {
        let name = entry.get("name").and_then(Value::as_str).ok_or_else(|| bad("unnamed tensor"))?;
        let shape: [usize; 2] = serde_json::from_value(entry.get("shape").cloned().ok_or_else(|| bad("no shape"))?)?;
        let n = shape[0] * shape[1];
        let end = offset + n * 8;
        if bytes.len() < end {
            return Err(bad("truncated payload"));
        }
        let data =
            bytes[offset..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        tensors.push((name.to_string(), Tensor::from_vec(shape[0], shape[1], data)));
        offset = end;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(TensorFile { header, tensors })
}

pub fn write_tensors(path: &Path, header: Value, tensors: &[(&str, &Tensor)]) -> Result<()> {
    write_atomic(path, &encode_tensors(header, tensors)?)
}

pub fn read_tensors(path: &Path) -> Result<TensorFile> {
    let bytes = fs::read(path).map_err(|e| Error::Artifact(format!("{}: {e}", path.display())))?;
    decode_tensors(&bytes)
}
