use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"AVCK1\0\0\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorDtype {
    F32,
    F64,
}

impl TensorDtype {
    fn code(self) -> u8 {
        match self {
            TensorDtype::F32 => 0,
            TensorDtype::F64 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

/// Versioned container of named tensors plus a JSON metadata document.
///
/// Layout (little-endian): magic `AVCK1\0\0\0`, `u32` metadata length, UTF-8
/// JSON, `u32` tensor count, then per tensor `u16` name length, name, `u8`
/// dtype (0 = f32, 1 = f64), `u8` rank, `u32` dims, raw values.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Checkpoint {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, dims: Vec<usize>, data: &[f64]) {
        self.tensors.push(Tensor {
            name: name.into(),
            dims,
            data: data.to_vec(),
        });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Tensor `name`, checked to hold exactly `len` values.
    pub fn require(&self, name: &str, len: usize) -> Result<&Tensor> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::validation(format!("checkpoint lacks tensor {name}")))?;
        if t.data.len() != len {
            return Err(Error::shape(format!("{len} values in {name}"), t.data.len()));
        }
        Ok(t)
    }

    pub fn write_to<W: Write>(&self, w: &mut W, dtype: TensorDtype) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            w.write_all(&(t.name.len() as u16).to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&[dtype.code(), t.dims.len() as u8])?;
            for &d in &t.dims {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            match dtype {
                TensorDtype::F32 => {
                    for &v in &t.data {
                        w.write_all(&(v as f32).to_le_bytes())?;
                    }
                }
                TensorDtype::F64 => {
                    for &v in &t.data {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> std::io::Result<Self> {
        let bad = |m: String| std::io::Error::new(std::io::ErrorKind::InvalidData, m);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not an AVCK1 checkpoint".into()));
        }
        let mut u4 = [0u8; 4];
        r.read_exact(&mut u4)?;
        let mut meta = vec![0u8; u32::from_le_bytes(u4) as usize];
        r.read_exact(&mut meta)?;
        let meta: serde_json::Value = serde_json::from_slice(&meta)?;
        r.read_exact(&mut u4)?;
        let count = u32::from_le_bytes(u4) as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let mut u2 = [0u8; 2];
            r.read_exact(&mut u2)?;
            let mut name = vec![0u8; u16::from_le_bytes(u2) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
            let mut hdr = [0u8; 2];
            r.read_exact(&mut hdr)?;
            let mut dims = Vec::with_capacity(hdr[1] as usize);
            for _ in 0..hdr[1] {
                r.read_exact(&mut u4)?;
                dims.push(u32::from_le_bytes(u4) as usize);
            }
            let len: usize = dims.iter().product();
            let data = match hdr[0] {
                0 => {
                    let mut buf = vec![0u8; 4 * len];
                    r.read_exact(&mut buf)?;
                    buf.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                        .collect()
                }
                1 => {
                    let mut buf = vec![0u8; 8 * len];
                    r.read_exact(&mut buf)?;
                    buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
                }
                d => return Err(bad(format!("tensor {name}: unknown dtype {d}"))),
            };
            tensors.push(Tensor { name, dims, data });
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path, dtype: TensorDtype) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf, dtype).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice()).map_err(|e| Error::format(path, e.to_string()))
    }
}
