//! Little-endian binary container used by model checkpoints: a 4-byte
//! magic, a version, named u32 metadata entries and named f64 tensors.
//! Entry order is preserved, so saves are byte-deterministic.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Default)]
pub(crate) struct Container {
    pub meta: Vec<(String, Vec<u32>)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn meta_entry(&self, name: &str) -> Option<&[u32]> {
        self.meta
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
    }

    pub fn tensor_entry(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn require_meta(&self, name: &str, path: &Path) -> Result<&[u32]> {
        self.meta_entry(name)
            .ok_or_else(|| Error::format(path, format!("missing metadata entry `{name}`")))
    }

    pub fn require_tensor(&self, name: &str, path: &Path) -> Result<&Tensor> {
        self.tensor_entry(name)
            .ok_or_else(|| Error::format(path, format!("missing tensor entry `{name}`")))
    }

    pub fn write(&self, path: &Path, magic: &[u8; 4], version: u32) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(magic)?;
        w.write_all(&version.to_le_bytes())?;
        w.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        for (name, values) in &self.meta {
            write_name(&mut w, name)?;
            w.write_all(&(values.len() as u32).to_le_bytes())?;
            for v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_name(&mut w, name)?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path, magic: &[u8; 4]) -> Result<(u32, Container)> {
        let mut r = BufReader::new(File::open(path)?);
        let mut got = [0u8; 4];
        r.read_exact(&mut got)?;
        if &got != magic {
            return Err(Error::format(
                path,
                format!(
                    "bad magic {:?} (expected {:?})",
                    String::from_utf8_lossy(&got),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        let version = read_u32(&mut r)?;
        let meta_count = read_u32(&mut r)? as usize;
        let mut meta = Vec::with_capacity(meta_count);
        for _ in 0..meta_count {
            let name = read_name(&mut r, path)?;
            let len = read_u32(&mut r)? as usize;
            let mut values = Vec::with_capacity(len);
            for _ in 0..len {
                values.push(read_u32(&mut r)?);
            }
            meta.push((name, values));
        }
        let tensor_count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(tensor_count);
        for _ in 0..tensor_count {
            let name = read_name(&mut r, path)?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u32(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut buf = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            tensors.push((name, Tensor::new(shape, data)?));
        }
        Ok((version, Container { meta, tensors }))
    }
}

fn write_name(w: &mut impl Write, name: &str) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    Ok(())
}

fn read_name(r: &mut impl Read, path: &Path) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::format(path, "non-utf8 entry name"))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
