//! `CART` tensor archive: the on-disk container for checkpoints and
//! datasets.
//!
//! Layout, all little-endian: magic bytes `CART`, format version `u16`,
//! record count `u32`; then per record a `u16` name length, the UTF-8 name,
//! a dtype code `u8` (0=f32, 1=f64, 2=u16, 3=u32), rank `u8`, one `u64` per
//! extent, and the raw payload.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"CART";
const VERSION: u16 = 1;

/// One stored array. Float variants round-trip through [`Tensor`]; integer
/// variants hold masks and token grids.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    F64 { shape: Vec<usize>, data: Vec<f64> },
    U16 { shape: Vec<usize>, data: Vec<u16> },
    U32 { shape: Vec<usize>, data: Vec<u32> },
}

impl Value {
    pub fn dtype(&self) -> Dtype {
        match self {
            Value::F32 { .. } => Dtype::F32,
            Value::F64 { .. } => Dtype::F64,
            Value::U16 { .. } => Dtype::U16,
            Value::U32 { .. } => Dtype::U32,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Value::F32 { shape, .. }
            | Value::F64 { shape, .. }
            | Value::U16 { shape, .. }
            | Value::U32 { shape, .. } => shape,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    fn check_len(self) -> Result<Self> {
        let (n, len) = match &self {
            Value::F32 { shape, data } => (shape.iter().product::<usize>(), data.len()),
            Value::F64 { shape, data } => (shape.iter().product::<usize>(), data.len()),
            Value::U16 { shape, data } => (shape.iter().product::<usize>(), data.len()),
            Value::U32 { shape, data } => (shape.iter().product::<usize>(), data.len()),
        };
        if n != len {
            return Err(Error::Archive(format!(
                "record payload holds {len} elements but shape {:?} needs {n}",
                self.shape()
            )));
        }
        Ok(self)
    }
}

/// Ordered, name-keyed collection of arrays. Record order is preserved on
/// round trip so files are byte-stable.
#[derive(Debug, Default, Clone)]
pub struct Archive {
    names: Vec<String>,
    records: HashMap<String, Value>,
}

impl Archive {
    pub fn new() -> Self {
        Archive::default()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(|s| s.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.records.contains_key(name)
    }

    pub fn insert(&mut self, name: &str, value: Value) -> Result<()> {
        let value = value.check_len()?;
        if self.records.insert(name.to_string(), value).is_some() {
            return Err(Error::Archive(format!("duplicate record name `{name}`")));
        }
        self.names.push(name.to_string());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Value> {
        self.records
            .get(name)
            .ok_or_else(|| Error::Archive(format!("missing record `{name}`")))
    }

    pub fn insert_tensor<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) -> Result<()> {
        let shape = t.shape().to_vec();
        let value = match T::DTYPE {
            Dtype::F32 => Value::F32 {
                shape,
                data: t.data().iter().map(|v| v.to_f64() as f32).collect(),
            },
            Dtype::F64 => Value::F64 {
                shape,
                data: t.data().iter().map(|v| v.to_f64()).collect(),
            },
            _ => unreachable!("Scalar is only implemented for floats"),
        };
        self.insert(name, value)
    }

    /// Fetch a float record as a tensor of the requested element type.
    /// The stored precision must match `T` exactly; silent down/up-casts of
    /// checkpoints hide bugs.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let value = self.get(name)?;
        match (T::DTYPE, value) {
            (Dtype::F32, Value::F32 { shape, data }) => Ok(Tensor::from_vec(
                shape,
                data.iter().map(|&v| T::from_f64(v as f64)).collect(),
            )?),
            (Dtype::F64, Value::F64 { shape, data }) => Ok(Tensor::from_vec(
                shape,
                data.iter().map(|&v| T::from_f64(v)).collect(),
            )?),
            _ => Err(Error::Archive(format!(
                "record `{name}` has dtype {:?}, expected {:?}",
                value.dtype(),
                T::DTYPE
            ))),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Archive::read_from(&mut r)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let count = u32::try_from(self.names.len())
            .map_err(|_| Error::Archive("more than u32::MAX records".into()))?;
        w.write_all(&count.to_le_bytes())?;
        for name in &self.names {
            let value = &self.records[name];
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Archive(format!("record name `{name}` exceeds u16 length")))?;
            w.write_all(&name_len.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[value.dtype().code()])?;
            let rank = u8::try_from(value.shape().len())
                .map_err(|_| Error::Archive("rank exceeds u8".into()))?;
            w.write_all(&[rank])?;
            for &extent in value.shape() {
                w.write_all(&(extent as u64).to_le_bytes())?;
            }
            match value {
                Value::F32 { data, .. } => {
                    for v in data {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                Value::F64 { data, .. } => {
                    for v in data {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                Value::U16 { data, .. } => {
                    for v in data {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
                Value::U32 { data, .. } => {
                    for v in data {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Archive(format!(
                "bad magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let version = read_u16(r)?;
        if version != VERSION {
            return Err(Error::Archive(format!(
                "unsupported format version {version} (supported: {VERSION})"
            )));
        }
        let count = read_u32(r)?;
        let mut archive = Archive::new();
        for _ in 0..count {
            let name_len = read_u16(r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            read_exact(r, &mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|e| Error::Archive(format!("record name is not UTF-8: {e}")))?;
            let dtype = Dtype::from_code(read_u8(r)?)?;
            let rank = read_u8(r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let extent = read_u64(r)?;
                shape.push(usize::try_from(extent).map_err(|_| {
                    Error::Archive(format!("extent {extent} does not fit in usize"))
                })?);
            }
            let numel: usize = shape.iter().product();
            let mut payload = vec![0u8; numel * dtype.byte_width()];
            read_exact(r, &mut payload)?;
            let value = match dtype {
                Dtype::F32 => Value::F32 {
                    shape,
                    data: payload
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                },
                Dtype::F64 => Value::F64 {
                    shape,
                    data: payload
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                },
                Dtype::U16 => Value::U16 {
                    shape,
                    data: payload
                        .chunks_exact(2)
                        .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                },
                Dtype::U32 => Value::U32 {
                    shape,
                    data: payload
                        .chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                },
            };
            archive.insert(&name, value)?;
        }
        Ok(archive)
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Archive(format!("truncated archive: {e}")))
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, &mut b)?;
    Ok(b[0])
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
