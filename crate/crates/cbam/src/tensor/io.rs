//! Flat binary tensor format used for checkpoints and golden tensors.
//!
//! Layout: magic bytes `CBT1`, `u32` rank, `u32` extents, then the row-major
//! `f64` payload. All integers and floats little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CBT1";

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R, name: &str) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, name)?;
    if &magic != MAGIC {
        return Err(Error::BadMagic {
            expected: "CBT1",
            found: magic,
        });
    }
    let rank = read_u32(r, name)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r, name)? as usize);
    }
    let count: usize = shape.iter().product();
    let mut data = Vec::with_capacity(count);
    let mut buf = [0u8; 8];
    for _ in 0..count {
        read_exact(r, &mut buf, name)?;
        data.push(f64::from_le_bytes(buf));
    }
    Tensor::from_vec(shape, data)
}

pub fn save_tensor<P: AsRef<Path>>(path: P, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor<P: AsRef<Path>>(path: P) -> Result<Tensor> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    read_tensor(&mut r, &path.display().to_string())
}

pub(crate) fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], name: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::TruncatedFile {
                path: name.to_string(),
            }
        } else {
            Error::Io(e)
        }
    })
}

pub(crate) fn read_u32<R: Read>(r: &mut R, name: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, name)?;
    Ok(u32::from_le_bytes(buf))
}
