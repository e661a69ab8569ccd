//! Binary tensor container and PGM export.
//!
//! Layout: 8-byte magic, `u32` format version, `u32` rank, `rank × u64`
//! dims, then the payload as little-endian `f64`. Everything round-trips
//! bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: [u8; 8] = *b"MINVTNSR";
pub const FORMAT_VERSION: u32 = 1;

pub(crate) fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn put_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn put_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("file is truncated".into()),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

pub(crate) fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(take(r)?))
}

pub(crate) fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(take(r)?))
}

pub(crate) fn get_f64<R: Read>(r: &mut R) -> Result<f64> {
    Ok(f64::from_le_bytes(take(r)?))
}

pub(crate) fn expect_header<R: Read>(r: &mut R, magic: &[u8; 8], what: &str) -> Result<()> {
    let got: [u8; 8] = take(r)?;
    if &got != magic {
        return Err(Error::Format(format!("not a {} file (bad magic)", what)));
    }
    let version = get_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported {} format version {} (expected {})",
            what, version, FORMAT_VERSION
        )));
    }
    Ok(())
}

/// Rank, dims and payload, without the file header.
pub(crate) fn write_tensor_body<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    put_u32(w, t.shape().len() as u32)?;
    for &d in t.shape() {
        put_u64(w, d as u64)?;
    }
    for &v in t.data() {
        put_f64(w, v)?;
    }
    Ok(())
}

// Larger claims are treated as corruption rather than allocated.
const MAX_ELEMENTS: u64 = 1 << 32;

pub(crate) fn read_tensor_body<R: Read>(r: &mut R) -> Result<Tensor> {
    let rank = get_u32(r)? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("implausible tensor rank {}", rank)));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: u64 = 1;
    for _ in 0..rank {
        let d = get_u64(r)?;
        count = count.saturating_mul(d);
        shape.push(d as usize);
    }
    if count > MAX_ELEMENTS {
        return Err(Error::Format(format!("tensor of {} elements is too large", count)));
    }
    let mut data = Vec::with_capacity(count as usize);
    for _ in 0..count {
        data.push(get_f64(r)?);
    }
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(&TENSOR_MAGIC)?;
    put_u32(w, FORMAT_VERSION)?;
    write_tensor_body(w, t)
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    expect_header(r, &TENSOR_MAGIC, "tensor")?;
    let t = read_tensor_body(r)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after tensor payload".into()));
    }
    Ok(t)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    read_tensor(&mut BufReader::new(File::open(path)?))
}

/// 16-bit binary PGM of a 2D tensor, mapping `[lo, hi]` linearly onto
/// `0..=65535` (defaults: data min and max).
pub fn write_pgm<W: Write>(w: &mut W, t: &Tensor, window: Option<(f64, f64)>) -> Result<()> {
    let &[rows, cols] = t.shape() else {
        return Err(Error::shape(format!("PGM needs a 2D tensor, got {:?}", t.shape())));
    };
    let (lo, hi) = window.unwrap_or_else(|| {
        t.data()
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
    });
    let span = if hi > lo { hi - lo } else { 1.0 };
    write!(w, "P5\n{} {}\n65535\n", cols, rows)?;
    for &v in t.data() {
        let q = (((v - lo) / span).clamp(0.0, 1.0) * 65535.0).round() as u16;
        w.write_all(&q.to_be_bytes())?;
    }
    Ok(())
}

pub fn save_pgm(path: impl AsRef<Path>, t: &Tensor, window: Option<(f64, f64)>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_pgm(&mut w, t, window)?;
    w.flush()?;
    Ok(())
}
