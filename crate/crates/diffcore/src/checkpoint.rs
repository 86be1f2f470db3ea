//! Checkpoint files: an 8-byte little-endian header length, a JSON header,
//! then every tensor's values as little-endian `f64` in declaration order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::array::Array;
use crate::{DiffError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    meta: Value,
}

/// Named tensors plus free-form JSON metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Value,
    pub tensors: Vec<(String, Array)>,
}

impl Checkpoint {
    pub fn new(meta: Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Array) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn push_all<'a>(&mut self, prefix: &str, tensors: impl IntoIterator<Item = &'a Array>) {
        for (i, t) in tensors.into_iter().enumerate() {
            self.push(format!("{prefix}.{i}"), t.clone());
        }
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| DiffError::Checkpoint(format!("missing tensor `{name}`")))
    }

    /// All tensors named `prefix.0`, `prefix.1`, ... in order.
    pub fn get_all(&self, prefix: &str) -> Vec<&Array> {
        let mut out = Vec::new();
        while let Ok(t) = self.get(&format!("{prefix}.{}", out.len())) {
            out.push(t);
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)
            .map_err(|e| DiffError::Checkpoint(format!("header encode: {e}")))?;
        let n_values: usize = self.tensors.iter().map(|(_, t)| t.len()).sum();
        let mut bytes = Vec::with_capacity(8 + json.len() + 8 * n_values);
        bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| DiffError::Checkpoint(m.to_string());
        if bytes.len() < 8 {
            return Err(bad("truncated header length"));
        }
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let body = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)
            .map_err(|e| DiffError::Checkpoint(format!("header decode: {e}")))?;
        let mut rest = &bytes[8 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            if rest.len() < 8 * n {
                return Err(bad("truncated tensor data"));
            }
            let data = rest[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            rest = &rest[8 * n..];
            tensors.push((entry.name, Array::new(entry.shape, data)?));
        }
        if !rest.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_length_prefixed_json_then_le_f64() {
        let mut ck = Checkpoint::new(serde_json::json!({"activation": "silu"}));
        ck.push("w", Array::matrix(1, 2, vec![1.5, -2.0]));
        let bytes = ck.to_bytes().unwrap();
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header: Value = serde_json::from_slice(&bytes[8..8 + hlen]).unwrap();
        assert_eq!(header["tensors"][0]["shape"], serde_json::json!([1, 2]));
        assert_eq!(header["meta"]["activation"], "silu");
        assert_eq!(&bytes[8 + hlen..8 + hlen + 8], &1.5f64.to_le_bytes());
        assert_eq!(bytes.len(), 8 + hlen + 16);
    }

    #[test]
    fn truncated_input_is_rejected() {
        let mut ck = Checkpoint::new(Value::Null);
        ck.push("w", Array::scalar(1.0));
        let bytes = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..4]).is_err());
    }

    proptest! {
        #[test]
        fn bytes_round_trip(values in prop::collection::vec(-1e6f64..1e6, 1..40), rows in 1usize..4) {
            let cols = values.len();
            let data: Vec<f64> = (0..rows).flat_map(|_| values.iter().copied()).collect();
            let mut ck = Checkpoint::new(serde_json::json!({"k": cols}));
            ck.push("a", Array::matrix(rows, cols, data));
            ck.push("b", Array::scalar(values[0]));
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back, ck);
        }
    }
}
