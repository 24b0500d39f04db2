//! Binary tensor records.
//!
//! Record layout: magic `"SVRT"`, version `u32 = 1` little-endian, name
//! length `u32` + UTF-8 name, dtype `u8` (0 = float32, 1 = float64), rank
//! `u32`, dims as `u64` each, then the payload as little-endian scalars.
//! A container file is a `u32` record count followed by that many records.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

use super::{Dtype, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"SVRT";
const VERSION: u32 = 1;

/// Tensor of either supported dtype, as read back from disk.
#[derive(Clone, Debug)]
pub enum DynTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl DynTensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            DynTensor::F32(_) => Dtype::F32,
            DynTensor::F64(_) => Dtype::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            DynTensor::F32(t) => t.shape(),
            DynTensor::F64(t) => t.shape(),
        }
    }

    /// Unwrap as `T`, erroring when the stored dtype differs.
    pub fn into_tensor<T: Scalar>(self) -> Result<Tensor<T>> {
        match (self, T::DTYPE) {
            (DynTensor::F32(t), Dtype::F32) => {
                Ok(Tensor::new(t.shape().to_vec(), bit_reinterpret(t.into_data()))
                    .expect("same layout"))
            }
            (DynTensor::F64(t), Dtype::F64) => {
                Ok(Tensor::new(t.shape().to_vec(), bit_reinterpret(t.into_data()))
                    .expect("same layout"))
            }
            (got, want) => Err(Error::Parse(format!(
                "tensor dtype {:?} does not match requested {:?}",
                got.dtype(),
                want
            ))),
        }
    }
}

// The two arms above are only taken when the element types already agree;
// this keeps the generic signature without unsafe transmutes.
fn bit_reinterpret<A: Scalar, B: Scalar>(data: Vec<A>) -> Vec<B> {
    data.into_iter().map(|v| B::from_f64(v.to_f64())).collect()
}

/// Serialize one named tensor record.
pub fn write_record<W: Write, T: Scalar>(w: &mut W, name: &str, t: &Tensor<T>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(name.len() as u32)?;
    w.write_all(name.as_bytes())?;
    w.write_u8(match T::DTYPE {
        Dtype::F32 => 0,
        Dtype::F64 => 1,
    })?;
    w.write_u32::<LittleEndian>(t.rank() as u32)?;
    for &d in t.shape() {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    match T::DTYPE {
        Dtype::F32 => {
            for &v in t.data() {
                w.write_f32::<LittleEndian>(v.to_f64() as f32)?;
            }
        }
        Dtype::F64 => {
            for &v in t.data() {
                w.write_f64::<LittleEndian>(v.to_f64())?;
            }
        }
    }
    Ok(())
}

/// Deserialize one named tensor record.
pub fn read_record<R: Read>(r: &mut R) -> Result<(String, DynTensor)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Parse(format!("bad record magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Parse(format!("unsupported record version {version}")));
    }
    let name_len = r.read_u32::<LittleEndian>()? as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|e| Error::Parse(e.to_string()))?;
    let dtype = r.read_u8()?;
    let rank = r.read_u32::<LittleEndian>()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.read_u64::<LittleEndian>()? as usize);
    }
    let n: usize = shape.iter().product();
    let tensor = match dtype {
        0 => {
            let mut data = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut data)?;
            DynTensor::F32(Tensor::new(shape, data).map_err(|e| Error::Parse(e.to_string()))?)
        }
        1 => {
            let mut data = vec![0f64; n];
            r.read_f64_into::<LittleEndian>(&mut data)?;
            DynTensor::F64(Tensor::new(shape, data).map_err(|e| Error::Parse(e.to_string()))?)
        }
        d => return Err(Error::Parse(format!("unknown dtype tag {d}"))),
    };
    Ok((name, tensor))
}

/// Write a container file: `u32` record count followed by the records.
pub fn save_tensors<T: Scalar, P: AsRef<Path>>(
    path: P,
    entries: &[(&str, &Tensor<T>)],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_u32::<LittleEndian>(entries.len() as u32)?;
    for (name, t) in entries {
        write_record(&mut w, name, t)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a whole container file in record order.
pub fn load_tensors<P: AsRef<Path>>(path: P) -> Result<Vec<(String, DynTensor)>> {
    let mut r = BufReader::new(File::open(path)?);
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(read_record(&mut r)?);
    }
    Ok(out)
}
