//! Binary tensor container, byte-compatible with the safetensors layout.
//!
//! ```text
//! [u64 LE header length N][N bytes JSON header][payload]
//! ```
//!
//! The header maps each tensor name to `{"dtype":"F32","shape":[..],
//! "data_offsets":[begin,end]}` plus an optional `"__metadata__"` string map.
//! Offsets are relative to the payload start. Tensors are written contiguously
//! in lexicographic name order, so identical inputs give identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::linalg::Tensor;

const METADATA_KEY: &str = "__metadata__";
const MAX_HEADER: u64 = 100 * 1024 * 1024;

/// Tensors and string metadata as stored on disk.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub tensors: BTreeMap<String, Tensor>,
    pub meta: BTreeMap<String, String>,
}

pub fn encode(c: &Container) -> Result<Vec<u8>> {
    let mut header = Map::new();
    let mut offset = 0usize;
    for (name, t) in &c.tensors {
        if name == METADATA_KEY {
            return Err(Error::Format(format!("reserved tensor name {name:?}")));
        }
        let expected: usize = t.shape().iter().product();
        if expected != t.len() {
            return Err(Error::Shape(format!(
                "tensor {name:?}: shape {:?} does not match {} elements",
                t.shape(),
                t.len()
            )));
        }
        let end = offset + 4 * t.len();
        header.insert(
            name.clone(),
            json!({"dtype": "F32", "shape": t.shape(), "data_offsets": [offset, end]}),
        );
        offset = end;
    }
    if !c.meta.is_empty() {
        let meta: Map<String, Value> = c
            .meta
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect();
        header.insert(METADATA_KEY.to_string(), Value::Object(meta));
    }
    let header_bytes = serde_json::to_vec(&Value::Object(header))
        .map_err(|e| Error::Format(format!("header serialization: {e}")))?;
    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for t in c.tensors.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 8 {
        return Err(Error::Format("file shorter than the 8-byte header length".into()));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    if n > MAX_HEADER || 8 + n > bytes.len() as u64 {
        return Err(Error::Format(format!("header length {n} exceeds file size")));
    }
    let n = n as usize;
    let header: Value = serde_json::from_slice(&bytes[8..8 + n])
        .map_err(|e| Error::Format(format!("header is not valid JSON: {e}")))?;
    let Value::Object(header) = header else {
        return Err(Error::Format("header must be a JSON object".into()));
    };
    let payload = &bytes[8 + n..];

    let mut meta = BTreeMap::new();
    let mut entries = Vec::new();
    for (name, entry) in header {
        if name == METADATA_KEY {
            let Value::Object(m) = entry else {
                return Err(Error::Format("__metadata__ must be an object".into()));
            };
            for (k, v) in m {
                let Value::String(s) = v else {
                    return Err(Error::Format(format!("metadata value for {k:?} is not a string")));
                };
                meta.insert(k, s);
            }
            continue;
        }
        entries.push(parse_entry(&name, &entry)?);
    }

    // Offsets must tile the payload exactly, with no overlap or gaps.
    let mut spans: Vec<(usize, usize, &str)> = entries
        .iter()
        .map(|e| (e.begin, e.end, e.name.as_str()))
        .collect();
    spans.sort();
    let mut cursor = 0usize;
    for (begin, end, name) in &spans {
        if *begin != cursor {
            return Err(Error::Format(format!(
                "tensor {name:?} starts at {begin}, expected {cursor} (overlap or gap)"
            )));
        }
        cursor = *end;
    }
    if cursor != payload.len() {
        return Err(Error::Format(format!(
            "tensor data covers {cursor} bytes but payload has {}",
            payload.len()
        )));
    }

    let mut tensors = BTreeMap::new();
    for e in entries {
        let data: Vec<f32> = payload[e.begin..e.end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("tensor {:?} has non-finite values", e.name)));
        }
        let t = Tensor::new(e.shape, data)
            .map_err(|err| Error::Format(format!("tensor {:?}: {err}", e.name)))?;
        tensors.insert(e.name, t);
    }
    Ok(Container { tensors, meta })
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    begin: usize,
    end: usize,
}

fn parse_entry(name: &str, entry: &Value) -> Result<Entry> {
    let bad = |what: &str| Error::Format(format!("tensor {name:?}: {what}"));
    let obj = entry.as_object().ok_or_else(|| bad("entry is not an object"))?;
    match obj.get("dtype").and_then(Value::as_str) {
        Some("F32") => {}
        Some(other) => return Err(bad(&format!("unsupported dtype {other}"))),
        None => return Err(bad("missing dtype")),
    }
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing shape"))?
        .iter()
        .map(|d| d.as_u64().map(|d| d as usize).ok_or_else(|| bad("bad shape entry")))
        .collect::<Result<Vec<_>>>()?;
    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing data_offsets"))?;
    let [begin, end] = offsets.as_slice() else {
        return Err(bad("data_offsets must have two entries"));
    };
    let begin = begin.as_u64().ok_or_else(|| bad("bad begin offset"))? as usize;
    let end = end.as_u64().ok_or_else(|| bad("bad end offset"))? as usize;
    if end < begin {
        return Err(bad("end offset before begin"));
    }
    let elems = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("shape overflows"))?;
    if elems.checked_mul(4) != Some(end - begin) {
        return Err(bad("byte range does not match shape"));
    }
    Ok(Entry {
        name: name.to_string(),
        shape,
        begin,
        end,
    })
}

pub fn write(c: &Container, path: &Path) -> Result<()> {
    let bytes = encode(c)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Container> {
    let bytes = std::fs::read(path)?;
    decode(&bytes)
}
