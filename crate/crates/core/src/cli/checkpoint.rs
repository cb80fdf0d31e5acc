//! Binary parameter snapshots.
//!
//! Layout: the magic `TRACEckpt1`, a little-endian `u32` manifest length, a
//! JSON manifest (metadata strings plus name, dtype, shape, offset and
//! length of every tensor), the little-endian payload, and a trailing
//! little-endian FNV-1a-64 digest over everything between magic and digest.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::numerics::rng::fnv1a;
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 10] = b"TRACEckpt1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn corrupt(what: impl Into<String>) -> Error {
    Error::Integrity(what.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            let offset = payload.len();
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(json!({
                "name": name,
                "dtype": "f32",
                "shape": t.shape(),
                "offset": offset,
                "len": payload.len() - offset,
            }));
        }
        let manifest = json!({ "meta": self.meta, "tensors": entries }).to_string();
        let mut body = Vec::with_capacity(4 + manifest.len() + payload.len());
        body.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        body.extend_from_slice(manifest.as_bytes());
        body.extend_from_slice(&payload);
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&body);
        out.extend_from_slice(&fnv1a(&body).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("not a checkpoint (bad magic)"));
        }
        let body = &bytes[MAGIC.len()..bytes.len() - 8];
        let digest = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
        if fnv1a(body) != digest {
            return Err(corrupt("checkpoint digest mismatch"));
        }
        let mlen = u32::from_le_bytes(body[..4].try_into().expect("4 bytes")) as usize;
        if 4 + mlen > body.len() {
            return Err(corrupt("manifest overruns the file"));
        }
        let manifest: Value =
            serde_json::from_slice(&body[4..4 + mlen]).map_err(|e| corrupt(format!("bad manifest: {e}")))?;
        let payload = &body[4 + mlen..];
        let mut meta = BTreeMap::new();
        if let Some(m) = manifest.get("meta").and_then(Value::as_object) {
            for (k, v) in m {
                let v = v.as_str().ok_or_else(|| corrupt(format!("metadata {k} is not a string")))?;
                meta.insert(k.clone(), v.to_string());
            }
        }
        let list = manifest
            .get("tensors")
            .and_then(Value::as_array)
            .ok_or_else(|| corrupt("manifest lacks a tensor list"))?;
        let mut tensors = Vec::with_capacity(list.len());
        for e in list {
            let name = e.get("name").and_then(Value::as_str).ok_or_else(|| corrupt("tensor without name"))?;
            if e.get("dtype").and_then(Value::as_str) != Some("f32") {
                return Err(corrupt(format!("tensor {name}: unsupported dtype")));
            }
            let shape: Vec<usize> = e
                .get("shape")
                .and_then(Value::as_array)
                .and_then(|a| a.iter().map(|d| d.as_u64().map(|x| x as usize)).collect())
                .ok_or_else(|| corrupt(format!("tensor {name}: bad shape")))?;
            let field = |k: &str| {
                e.get(k)
                    .and_then(Value::as_u64)
                    .map(|x| x as usize)
                    .ok_or_else(|| corrupt(format!("tensor {name}: bad {k}")))
            };
            let (offset, len) = (field("offset")?, field("len")?);
            let count: usize = shape.iter().product();
            if len != 4 * count || offset.checked_add(len).is_none_or(|end| end > payload.len()) {
                return Err(corrupt(format!("tensor {name}: extent disagrees with shape {shape:?}")));
            }
            let data = payload[offset..offset + len]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((name.to_string(), Tensor::new(&shape, data)?));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
