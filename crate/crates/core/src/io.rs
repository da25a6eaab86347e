//! Binary tensor files.
//!
//! A single tensor ("NDTN"):
//!
//! ```text
//! b"NDTN" | u8 dtype (0 = f64, 1 = f32) | u8 rank | rank × u64 dims | raw data
//! ```
//!
//! An archive of named tensors ("NDTA"):
//!
//! ```text
//! b"NDTA" | u32 count | count × (u32 name_len | utf-8 name | NDTN record)
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const TENSOR_MAGIC: &[u8; 4] = b"NDTN";
const ARCHIVE_MAGIC: &[u8; 4] = b"NDTA";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64 = 0,
    F32 = 1,
}

impl DType {
    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::F64),
            1 => Ok(DType::F32),
            t => Err(Error::Format(format!("unknown dtype tag {t}"))),
        }
    }
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor, dtype: DType) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} does not fit the header", t.rank())));
    }
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&[dtype as u8, t.rank() as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    match dtype {
        DType::F64 => t.data().iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
        DType::F32 => t.data().iter().for_each(|v| buf.extend_from_slice(&(*v as f32).to_le_bytes())),
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let magic: [u8; 4] = read_exact(r)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let [tag, rank] = read_exact::<_, 2>(r)?;
    let dtype = DType::from_tag(tag)?;
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        shape.push(u64::from_le_bytes(read_exact(r)?) as usize);
    }
    let n: usize = shape.iter().product();
    let data = match dtype {
        DType::F64 => {
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw)?;
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
        }
        DType::F32 => {
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw)?;
            raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
        }
    };
    Tensor::new(&shape, data)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t, DType::F64)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    read_tensor(&mut bytes.as_slice())
}

pub fn write_archive<W: Write>(w: &mut W, items: &[(String, Tensor)], dtype: DType) -> Result<()> {
    w.write_all(ARCHIVE_MAGIC)?;
    w.write_all(&(items.len() as u32).to_le_bytes())?;
    for (name, t) in items {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, t, dtype)?;
    }
    Ok(())
}

pub fn read_archive<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let magic: [u8; 4] = read_exact(r)?;
    if &magic != ARCHIVE_MAGIC {
        return Err(Error::Format(format!("bad archive magic {magic:?}")));
    }
    let count = u32::from_le_bytes(read_exact(r)?);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u32::from_le_bytes(read_exact(r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        out.push((name, read_tensor(r)?));
    }
    Ok(out)
}

pub fn save_archive(path: impl AsRef<Path>, items: &[(String, Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    write_archive(&mut buf, items, DType::F64)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_archive(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path)?;
    read_archive(&mut bytes.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(&[2, 1], vec![1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, DType::F64).unwrap();
        assert_eq!(&buf[..4], b"NDTN");
        assert_eq!(buf[4], 0);
        assert_eq!(buf[5], 2);
        assert_eq!(u64::from_le_bytes(buf[6..14].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(buf[14..22].try_into().unwrap()), 1);
        assert_eq!(f64::from_le_bytes(buf[22..30].try_into().unwrap()), 1.5);
        assert_eq!(buf.len(), 6 + 16 + 16);
    }

    #[test]
    fn f32_storage_rounds() {
        let t = Tensor::from_vec(vec![0.1, 3.0]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, DType::F32).unwrap();
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back.data()[1], 3.0);
        assert_eq!(back.data()[0], 0.1f32 as f64);
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"NOPE\x00\x00".to_vec();
        assert!(matches!(read_tensor(&mut buf.as_slice()), Err(Error::Format(_))));
    }
}
