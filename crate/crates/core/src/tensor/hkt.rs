//! HKT1 tensor container: a tiny binary format for weights and fixtures.
//!
//! Layout, all little-endian:
//! magic `HKT1` | u32 version (1) | u8 dtype (0=f32, 1=f64, 2=u8) |
//! u8 rank | rank x u32 extents | row-major payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::{Error, Result, Tensor};

const MAGIC: [u8; 4] = *b"HKT1";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U8 = 2,
}

impl DType {
    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            2 => Ok(DType::U8),
            other => Err(Error::Format(format!("hkt: unknown dtype tag {other}"))),
        }
    }
}

/// Sealed helper mapping scalar types onto dtype tags and byte codecs.
pub trait HktScalar: Sized {
    const DTYPE: DType;
    fn write_one(w: &mut impl Write, v: Self) -> std::io::Result<()>;
    fn read_one(r: &mut impl Read) -> std::io::Result<Self>;
}

impl HktScalar for f32 {
    const DTYPE: DType = DType::F32;
    fn write_one(w: &mut impl Write, v: Self) -> std::io::Result<()> {
        w.write_all(&v.to_le_bytes())
    }
    fn read_one(r: &mut impl Read) -> std::io::Result<Self> {
        let mut buf = [0u8; 4];
        r.read_exact(&mut buf)?;
        Ok(f32::from_le_bytes(buf))
    }
}

impl HktScalar for f64 {
    const DTYPE: DType = DType::F64;
    fn write_one(w: &mut impl Write, v: Self) -> std::io::Result<()> {
        w.write_all(&v.to_le_bytes())
    }
    fn read_one(r: &mut impl Read) -> std::io::Result<Self> {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        Ok(f64::from_le_bytes(buf))
    }
}

impl HktScalar for u8 {
    const DTYPE: DType = DType::U8;
    fn write_one(w: &mut impl Write, v: Self) -> std::io::Result<()> {
        w.write_all(&[v])
    }
    fn read_one(r: &mut impl Read) -> std::io::Result<Self> {
        let mut buf = [0u8; 1];
        r.read_exact(&mut buf)?;
        Ok(buf[0])
    }
}

fn write_header(w: &mut impl Write, dtype: DType, shape: &[usize]) -> Result<()> {
    if shape.len() > u8::MAX as usize {
        return Err(Error::Format(format!("hkt: rank {} too large", shape.len())));
    }
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[dtype as u8, shape.len() as u8])?;
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("hkt: extent {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

fn read_header(r: &mut impl Read) -> Result<(DType, Vec<usize>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Format("hkt: bad magic".into()));
    }
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver)?;
    let ver = u32::from_le_bytes(ver);
    if ver != VERSION {
        return Err(Error::Format(format!("hkt: unsupported version {ver}")));
    }
    let mut tags = [0u8; 2];
    r.read_exact(&mut tags)?;
    let dtype = DType::from_tag(tags[0])?;
    let rank = tags[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d = [0u8; 4];
        r.read_exact(&mut d)?;
        shape.push(u32::from_le_bytes(d) as usize);
    }
    Ok((dtype, shape))
}

/// Write a float tensor. The dtype tag follows the element type.
pub fn write_hkt<T: crate::Real + HktScalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_header(&mut w, T::DTYPE, t.shape())?;
    for &v in t.data() {
        T::write_one(&mut w, v)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a float tensor, requiring the file dtype to match `T` exactly.
pub fn read_hkt<T: crate::Real + HktScalar>(path: &Path) -> Result<Tensor<T>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let (dtype, shape) = read_header(&mut r)?;
    if dtype != T::DTYPE {
        return Err(Error::Format(format!(
            "hkt: {} holds {:?}, expected {:?}",
            path.display(),
            dtype,
            T::DTYPE
        )));
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(T::read_one(&mut r)?);
    }
    let mut tail = [0u8; 1];
    if r.read(&mut tail)? != 0 {
        return Err(Error::Format(format!("hkt: trailing bytes in {}", path.display())));
    }
    Tensor::new(&shape, data)
}

/// Write raw u8 payload (masks) with a shape header.
pub fn write_hkt_u8(path: &Path, shape: &[usize], data: &[u8]) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != data.len() {
        return Err(Error::Format(format!("hkt: shape {:?} wants {} bytes, got {}", shape, numel, data.len())));
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_header(&mut w, DType::U8, shape)?;
    w.write_all(data)?;
    w.flush()?;
    Ok(())
}

pub fn read_hkt_u8(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let (dtype, shape) = read_header(&mut r)?;
    if dtype != DType::U8 {
        return Err(Error::Format(format!("hkt: {} holds {:?}, expected U8", path.display(), dtype)));
    }
    let numel: usize = shape.iter().product();
    let mut data = vec![0u8; numel];
    r.read_exact(&mut data)?;
    let mut tail = [0u8; 1];
    if r.read(&mut tail)? != 0 {
        return Err(Error::Format(format!("hkt: trailing bytes in {}", path.display())));
    }
    Ok((shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.hkt");
        let t = Tensor::<f32>::new(&[2, 3], vec![1.5, -0.25, 3e-8, f32::MIN_POSITIVE, 1e30, -0.0]).unwrap();
        write_hkt(&path, &t).unwrap();
        let back = read_hkt::<f32>(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn f64_and_scalar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.hkt");
        let t = Tensor::<f64>::scalar(std::f64::consts::PI);
        write_hkt(&path, &t).unwrap();
        let back = read_hkt::<f64>(&path).unwrap();
        assert!(back.shape().is_empty());
        assert_eq!(back.item().to_bits(), t.item().to_bits());
    }

    #[test]
    fn u8_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.hkt");
        let data: Vec<u8> = (0..12).collect();
        write_hkt_u8(&path, &[3, 4], &data).unwrap();
        let (shape, back) = read_hkt_u8(&path).unwrap();
        assert_eq!(shape, vec![3, 4]);
        assert_eq!(back, data);
    }

    #[test]
    fn rejects_bad_magic_and_dtype_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.hkt");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00").unwrap();
        assert!(read_hkt::<f32>(&path).is_err());

        let path2 = dir.path().join("mismatch.hkt");
        write_hkt(&path2, &Tensor::<f64>::scalar(1.0)).unwrap();
        assert!(read_hkt::<f32>(&path2).is_err());
    }

    #[test]
    fn rejects_trailing_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trail.hkt");
        write_hkt(&path, &Tensor::<f32>::scalar(1.0)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_hkt::<f32>(&path).is_err());
    }
}
