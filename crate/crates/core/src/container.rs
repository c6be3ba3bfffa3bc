//! `PKTC` tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "PKTC" | u32 version=1 | u32 meta_len | meta (UTF-8 JSON)
//! u32 count | count × { u32 name_len | name | u8 dtype(0=f32) | u32 rank | rank × u64 dim | u64 offset }
//! payload: row-major f32 data, offsets relative to the payload start
//! ```

use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::error::{PktError, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"PKTC";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub metadata: Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Container {
    pub fn new(metadata: Value) -> Self {
        Container { metadata, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name).ok_or_else(|| PktError::container(name, "tensor missing"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.metadata).expect("JSON value serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * t.len() as u64;
        }
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(PktError::container("magic", "not a PKTC container"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            let detail = if version.swap_bytes() == VERSION {
                "byte-swapped version field: foreign-endian container".to_string()
            } else {
                format!("unsupported version {version}")
            };
            return Err(PktError::container("version", detail));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta_bytes = r.take(meta_len, "metadata")?;
        let text = std::str::from_utf8(meta_bytes)
            .map_err(|e| PktError::container("metadata", format!("invalid UTF-8: {e}")))?;
        let metadata: Value =
            serde_json::from_str(text).map_err(|e| PktError::container("metadata", format!("invalid JSON: {e}")))?;

        let count = r.u32("tensor count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let field = |what: &str| format!("tensor[{i}].{what}");
            let name_len = r.u32(&field("name_len"))? as usize;
            let name = std::str::from_utf8(r.take(name_len, &field("name"))?)
                .map_err(|_| PktError::container(field("name"), "invalid UTF-8"))?
                .to_string();
            let dtype = r.take(1, &field("dtype"))?[0];
            if dtype != DTYPE_F32 {
                return Err(PktError::container(field("dtype"), format!("unknown dtype code {dtype}")));
            }
            let rank = r.u32(&field("rank"))? as usize;
            if rank > 8 {
                return Err(PktError::container(field("rank"), format!("implausible rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64(&field("shape"))? as usize);
            }
            let offset = r.u64(&field("offset"))? as usize;
            entries.push((name, shape, offset));
        }

        let payload = &bytes[r.pos..];
        let mut tensors = Vec::with_capacity(entries.len());
        let mut expected_offset = 0usize;
        for (name, shape, offset) in entries {
            let n: usize = shape.iter().product();
            if offset != expected_offset {
                return Err(PktError::container(
                    format!("{name}.offset"),
                    format!("expected {expected_offset}, found {offset}"),
                ));
            }
            let end = offset + 4 * n;
            if end > payload.len() {
                return Err(PktError::container(
                    format!("{name}.payload"),
                    format!("truncated: need {end} bytes, have {}", payload.len()),
                ));
            }
            let data =
                payload[offset..end].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t =
                Tensor::new(shape, data).map_err(|e| PktError::container(format!("{name}.shape"), e.to_string()))?;
            tensors.push((name, t));
            expected_offset = end;
        }
        if expected_offset != payload.len() {
            return Err(PktError::container("payload", format!("{} trailing bytes", payload.len() - expected_offset)));
        }
        Ok(Container { metadata, tensors })
    }

    /// Writes through a temporary file so a crash never leaves a partial container.
    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let tmp = path.with_extension("pktc.tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(PktError::Dependency(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(PktError::container(field, format!("truncated at byte {} (needed {n} more)", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        let b = self.take(8, field)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Container {
        let mut c = Container::new(json!({"kind": "test", "seed": 3}));
        c.push("a", Tensor::from_rows(&[[1.0, -0.0], [f32::MIN_POSITIVE as f64, 3.5]]));
        c.push("b", Tensor::vector(vec![0.1f32, 0.2, 0.3]));
        c
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.metadata, c.metadata);
        for ((n1, t1), (n2, t2)) in c.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert!(t1.bitwise_eq(t2));
        }
    }

    #[test]
    fn truncation_names_field() {
        let bytes = sample().to_bytes();
        for cut in [2, 6, 10, 20, bytes.len() - 1] {
            let err = Container::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, PktError::Container { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn bad_magic_and_foreign_endian() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        let err = Container::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("magic"));

        let mut bytes = sample().to_bytes();
        bytes[4..8].copy_from_slice(&VERSION.to_be_bytes());
        let err = Container::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("foreign-endian"), "{err}");
    }
}
