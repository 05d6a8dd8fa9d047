//! Binary tensor container used for all saved model state.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (kind, free-form metadata, tensor names and shapes), then all tensor
//! values as little-endian `f64` in header order. Values round-trip bit-exactly.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RPSVCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<(String, Vec<usize>)>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Checkpoint {
            kind: kind.to_owned(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn extend(&mut self, named: Vec<(String, Tensor)>) {
        self.tensors.extend(named);
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::invalid("checkpoint", format!("missing tensor `{name}`")))
    }

    pub fn meta_field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::invalid("checkpoint", format!("missing metadata `{key}`")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::invalid(
                "checkpoint",
                format!("expected a `{kind}` checkpoint, found `{}`", self.kind),
            ));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), t.shape().to_vec()))
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, path)?;
        if &magic != MAGIC {
            return Err(Error::format(path, "not a checkpoint file"));
        }
        let mut word = [0u8; 4];
        read_exact(&mut r, &mut word, path)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let mut len = [0u8; 8];
        read_exact(&mut r, &mut len, path)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > r.len() {
            return Err(Error::format(path, "truncated header"));
        }
        let header: Header = serde_json::from_slice(&r[..len])
            .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
        r = &r[len..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for (name, shape) in header.tensors {
            let n: usize = shape.iter().product();
            if r.len() < 8 * n {
                return Err(Error::format(path, format!("truncated data for `{name}`")));
            }
            let data = r[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            r = &r[8 * n..];
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if !r.is_empty() {
            return Err(Error::format(path, "trailing bytes after tensor data"));
        }
        Ok(Checkpoint {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Checkpoint::from_bytes(&bytes, path)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(path, "truncated checkpoint"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut ck = Checkpoint::new("test", serde_json::json!({"a": 3}));
        let odd = vec![f64::MIN_POSITIVE, -0.0, 1.0 / 3.0, f64::MAX, 5e-324, -1e300];
        ck.push("odd", Tensor::new(vec![2, 3], odd.clone()).unwrap());
        ck.push("empty", Tensor::new(vec![0], vec![]).unwrap());
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.kind, "test");
        assert_eq!(back.meta_field::<i32>("a").unwrap(), 3);
        let t = back.tensor("odd").unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        let bits: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, odd.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let mut ck = Checkpoint::new("test", serde_json::Value::Null);
        ck.push("x", Tensor::from_vec(vec![1.0, 2.0]));
        let bytes = ck.to_bytes().unwrap();
        let p = Path::new("mem");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        assert!(Checkpoint::from_bytes(b"garbage!garbage!", p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, p).is_err());
    }
}
