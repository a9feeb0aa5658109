//! Binary tensor blobs: `"CO4T"`, `u32` rank, `u32` dims, then `f64` data,
//! all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"CO4T";

const MAX_RANK: u32 = 16;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::shape(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: &mut u64, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(*offset, format!("truncated while reading {what}"))
        } else {
            Error::Io(e)
        }
    })?;
    *offset += buf.len() as u64;
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut off = 0u64;
    let mut magic = [0u8; 4];
    read_exact_at(r, &mut magic, &mut off, "magic")?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    read_exact_at(r, &mut word, &mut off, "rank")?;
    let rank = u32::from_le_bytes(word);
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::format(4, format!("unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        let at = off;
        read_exact_at(r, &mut word, &mut off, "dimension")?;
        let d = u32::from_le_bytes(word) as usize;
        if d == 0 {
            return Err(Error::format(at, "zero dimension"));
        }
        shape.push(d);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(8, "element count overflows"))?;
    let mut data = Vec::with_capacity(n.min(1 << 24));
    let mut buf = [0u8; 8];
    for _ in 0..n {
        read_exact_at(r, &mut buf, &mut off, "payload")?;
        data.push(f64::from_le_bytes(buf));
    }
    Tensor::new(shape, data)
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
