//! `ICLC` checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "ICLC" | u32 version | u64 tensor count
//! per tensor: u32 name length | UTF-8 name | u32 ndim | u64 dims[ndim]
//!             | u8 dtype (0 = f32, 1 = f64) | raw little-endian data
//! ```

use std::fs;
use std::path::Path;

use crate::error::{IclError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ICLC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    F64(Tensor),
}

impl TensorData {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32 { shape, .. } => shape,
            TensorData::F64(t) => t.shape(),
        }
    }

    /// Widened to `f64`.
    pub fn to_tensor(&self) -> Result<Tensor> {
        match self {
            TensorData::F32 { shape, data } => {
                Tensor::new(shape, data.iter().map(|&v| v as f64).collect())
            }
            TensorData::F64(t) => Ok(t.clone()),
        }
    }
}

/// Named tensors in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, TensorData)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), TensorData::F64(tensor)));
    }

    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<Tensor> {
        self.get(name)
            .ok_or_else(|| IclError::Config(format!("checkpoint has no tensor named {name}")))?
            .to_tensor()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let shape = t.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t {
                TensorData::F32 { data, .. } => {
                    out.push(0);
                    data.iter()
                        .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                }
                TensorData::F64(t) => {
                    out.push(1);
                    t.data()
                        .iter()
                        .for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(IclError::Format {
                offset: 0,
                detail: "bad magic, expected ICLC".into(),
            });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error_at(4, format!("unsupported version {version}")));
        }
        let count = r.u64("tensor count")?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let name_at = r.pos;
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| r.error_at(name_at, "tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32("ndim")? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                shape.push(r.u64("dim")? as usize);
            }
            let dtype_at = r.pos;
            let dtype = r.take(1, "dtype")?[0];
            let n: usize = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| r.error_at(dtype_at, "tensor size overflows".into()))?;
            if ndim == 0 || n == 0 {
                return Err(
                    r.error_at(dtype_at, format!("tensor {name} has empty shape {shape:?}"))
                );
            }
            let data = match dtype {
                0 => TensorData::F32 {
                    data: r
                        .take(4 * n, "f32 data")?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                    shape,
                },
                1 => {
                    let values = r
                        .take(8 * n, "f64 data")?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    TensorData::F64(Tensor::new(&shape, values)?)
                }
                other => return Err(r.error_at(dtype_at, format!("unknown dtype code {other}"))),
            };
            entries.push((name, data));
        }
        if r.pos != bytes.len() {
            return Err(r.error_at(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error_at(&self, offset: usize, detail: String) -> IclError {
        IclError::Format {
            offset: offset as u64,
            detail,
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error_at(self.pos, format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout_of_a_small_checkpoint() {
        let mut c = Checkpoint::new();
        c.push("ab", Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
        let bytes = c.encode();
        let mut want = Vec::new();
        want.extend_from_slice(b"ICLC");
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u64.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u64.to_le_bytes());
        want.push(1);
        want.extend_from_slice(&1.0f64.to_le_bytes());
        want.extend_from_slice(&(-2.0f64).to_le_bytes());
        assert_eq!(bytes, want);
        assert_eq!(bytes.len(), 4 + 4 + 8 + 4 + 2 + 4 + 8 + 1 + 16);
    }

    #[test]
    fn f32_entries_survive_round_trip() {
        let c = Checkpoint {
            entries: vec![(
                "x".into(),
                TensorData::F32 {
                    shape: vec![3],
                    data: vec![0.5, 1.5, -3.25],
                },
            )],
        };
        let bytes = c.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode(), bytes);
        assert_eq!(back.require("x").unwrap().data(), &[0.5, 1.5, -3.25]);
    }

    #[test]
    fn rejects_bad_headers_and_truncation() {
        let mut c = Checkpoint::new();
        c.push("w", Tensor::filled(&[2, 2], 0.25));
        let bytes = c.encode();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(
            Checkpoint::decode(&bad),
            Err(IclError::Format { offset: 0, .. })
        ));
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(
            Checkpoint::decode(&bad_version),
            Err(IclError::Format { offset: 4, .. })
        ));
        let cut = &bytes[..bytes.len() - 3];
        match Checkpoint::decode(cut) {
            Err(IclError::Format { offset, .. }) => assert!(offset > 16),
            other => panic!("expected format error, got {other:?}"),
        }
        let mut bad_dtype = bytes.clone();
        let dtype_at = 4 + 4 + 8 + 4 + 1 + 4 + 16;
        bad_dtype[dtype_at] = 7;
        assert!(matches!(
            Checkpoint::decode(&bad_dtype),
            Err(IclError::Format { offset, .. }) if offset == dtype_at as u64
        ));
    }
}
