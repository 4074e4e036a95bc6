//! Binary checkpoint layout:
//!
//! ```text
//! "LZCK1"  u32 count
//! count × { u16 name_len, name (UTF-8), u8 rank, rank × u32 dim, numel × f32 }
//! ```
//!
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::ParameterRegistry;
use crate::error::{ensure, Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"LZCK1";

pub fn write_checkpoint(path: impl AsRef<Path>, registry: &ParameterRegistry) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(registry.len() as u32).to_le_bytes())?;
    for (name, p) in registry.iter() {
        let bytes = name.as_bytes();
        ensure!(
            bytes.len() <= u16::MAX as usize,
            Format,
            "parameter name too long: {name}"
        );
        ensure!(
            p.shape.len() <= u8::MAX as usize,
            Format,
            "rank of {name} too large"
        );
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[p.shape.len() as u8])?;
        for &d in &p.shape {
            ensure!(
                d <= u32::MAX as usize,
                Format,
                "dimension of {name} too large"
            );
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &p.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => {
            Error::Format(format!("truncated checkpoint while reading {what}"))
        }
        _ => Error::Io(e),
    })
}

/// Raw `(name, shape, values)` triples in file order.
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 5];
    read_exact(&mut r, &mut magic, "magic")?;
    ensure!(
        &magic == CHECKPOINT_MAGIC,
        Format,
        "bad magic {:?}",
        String::from_utf8_lossy(&magic)
    );
    let mut b4 = [0u8; 4];
    read_exact(&mut r, &mut b4, "tensor count")?;
    let count = u32::from_le_bytes(b4) as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let mut b2 = [0u8; 2];
        read_exact(&mut r, &mut b2, "name length")?;
        let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
        read_exact(&mut r, &mut name, "name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank, "rank")?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            read_exact(&mut r, &mut b4, "dimension")?;
            shape.push(u32::from_le_bytes(b4) as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        read_exact(&mut r, &mut raw, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, shape, data));
    }
    let mut extra = [0u8; 1];
    ensure!(
        matches!(r.read(&mut extra), Ok(0)),
        Format,
        "trailing bytes after {count} tensors"
    );
    Ok(out)
}
