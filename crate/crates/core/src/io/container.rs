//! Sectioned binary container.
//!
//! ```text
//! magic    8 bytes  "TANGENT\0"
//! version  u32 LE
//! hlen     u64 LE   byte length of the JSON header
//! header   hlen bytes of UTF-8 JSON
//! payload  f64 LE values of every tensor listed in the header, in order
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TANGENT\0";
pub const FORMAT_VERSION: u32 = 1;

/// Upper bound on header size, to fail fast on corrupt files.
const MAX_HEADER: u64 = 1 << 30;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub kind: String,
    pub tensors: Vec<TensorEntry>,
    /// Kind-specific metadata.
    pub meta: serde_json::Value,
}

pub fn write_container<W: Write>(
    mut w: W,
    kind: &str,
    meta: serde_json::Value,
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    let header = Header {
        format_version: FORMAT_VERSION,
        kind: kind.to_string(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::new();
    for (_, t) in tensors {
        buf.clear();
        buf.reserve(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_container<R: Read>(mut r: R) -> Result<(Header, Vec<(String, Tensor)>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| Error::Data("file too short for a container".into()))?;
    if &magic != MAGIC {
        return Err(Error::Data("not a tangent container (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(Error::Data(format!(
            "unsupported container version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let hlen = u64::from_le_bytes(len);
    if hlen > MAX_HEADER {
        return Err(Error::Data(format!("header length {hlen} is implausible")));
    }
    let mut json = vec![0u8; hlen as usize];
    r.read_exact(&mut json)
        .map_err(|_| Error::Data("container truncated inside the header".into()))?;
    let header: Header =
        serde_json::from_slice(&json).map_err(|e| Error::Data(format!("malformed container header: {e}")))?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Data(format!("container truncated inside tensor {}", entry.name)))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::from_vec(&entry.shape, data)
            .map_err(|e| Error::Data(format!("tensor {}: {e}", entry.name)))?;
        tensors.push((entry.name.clone(), t));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Data("trailing bytes after the last tensor".into()));
    }
    Ok((header, tensors))
}
