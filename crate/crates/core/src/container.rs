//! Single-file tensor container used for checkpoints and array dumps.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "ROSSCTNR"
//! version   u32      currently 1
//! hdr_len   u64      length of the JSON header in bytes
//! header    JSON     {"kind": str, "meta": any, "tensors": [
//!                       {"name", "dtype": "f32"|"f64", "shape", "offset", "nbytes"}]}
//! payload   raw      tensor data, offsets relative to the payload start
//! ```

use std::fs;
use std::path::Path;

use ross_autograd::{DType, ParamStore, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RossError};

pub const MAGIC: &[u8; 8] = b"ROSSCTNR";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Debug, Clone)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    entries: Vec<Entry>,
    payload: Vec<u8>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            entries: Vec::new(),
            payload: Vec::new(),
        }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, tensor: &Tensor<T>) {
        let offset = self.payload.len();
        for &x in tensor.data() {
            x.write_le(&mut self.payload);
        }
        self.entries.push(Entry {
            name: name.into(),
            dtype: T::DTYPE.name().to_string(),
            shape: tensor.shape().to_vec(),
            offset,
            nbytes: self.payload.len() - offset,
        });
    }

    /// Stores every parameter under `prefix + name`.
    pub fn push_store<T: Scalar>(&mut self, prefix: &str, store: &ParamStore<T>) {
        for (_, name, t) in store.iter() {
            self.push(format!("{prefix}{name}"), t);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.name == name)
    }

    /// Reads a tensor, converting from the stored dtype if needed.
    pub fn get<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self
            .entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| RossError::Format {
                path: Default::default(),
                msg: format!("missing tensor {name}"),
            })?;
        let dtype = DType::parse(&e.dtype).ok_or_else(|| RossError::Format {
            path: Default::default(),
            msg: format!("unknown dtype {}", e.dtype),
        })?;
        let bytes = &self.payload[e.offset..e.offset + e.nbytes];
        let data: Vec<T> = match dtype {
            DType::F32 => bytes.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
            DType::F64 => bytes.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
        };
        Ok(Tensor::from_vec(&e.shape, data)?)
    }

    /// Overwrites every parameter of `store` from `prefix + name` entries.
    pub fn load_store<T: Scalar>(&self, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
        let names: Vec<String> = store.iter().map(|(_, n, _)| n.to_string()).collect();
        for name in names {
            let t = self.get(&format!("{prefix}{name}"))?;
            store.assign(&name, t)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self.entries.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| RossError::Format {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let hend = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..hend])?;
        let payload = bytes[hend..].to_vec();
        for e in &header.tensors {
            let size = DType::parse(&e.dtype).ok_or_else(|| bad("unknown dtype"))?.size();
            if e.offset + e.nbytes > payload.len() || e.nbytes != size * e.shape.iter().product::<usize>() {
                return Err(bad(&format!("tensor {} out of bounds", e.name)));
            }
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            entries: header.tensors,
            payload,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| RossError::io(dir, e))?;
        }
        // Write-then-rename so a failed write never clobbers a good file.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| RossError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| RossError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| RossError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Checks the kind tag.
    pub fn expect_kind(self, kind: &str, path: &Path) -> Result<Self> {
        if self.kind != kind {
            return Err(RossError::Format {
                path: path.to_path_buf(),
                msg: format!("expected a {kind} container, found {}", self.kind),
            });
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_mixed_dtypes() {
        let mut c = Container::new("arrays", serde_json::json!({"note": "x"}));
        let a = Tensor::<f32>::from_vec(&[2, 2], vec![1.0, -2.5, 3.25, 0.0]).unwrap();
        let b = Tensor::<f64>::from_vec(&[3], vec![1e-300, 2.0, -0.1]).unwrap();
        c.push("a", &a);
        c.push("b", &b);
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.kind, "arrays");
        assert_eq!(back.get::<f32>("a").unwrap(), a);
        assert_eq!(back.get::<f64>("b").unwrap(), b);
        assert!(back.get::<f32>("missing").is_err());
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(Container::from_bytes(b"nope", Path::new("x")).is_err());
        let mut bytes = Container::new("k", serde_json::Value::Null).to_bytes().unwrap();
        bytes[8] = 9;
        assert!(Container::from_bytes(&bytes, Path::new("x")).is_err());
    }
}
