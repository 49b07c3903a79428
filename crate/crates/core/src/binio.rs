//! Little-endian primitives shared by the snapshot and checkpoint formats.

use std::io::{self, Read, Write};

use crate::error::{LasdiError, Result};

pub(crate) fn write_u64<W: Write>(w: &mut W, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_f64<W: Write>(w: &mut W, v: f64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_f64s<W: Write>(w: &mut W, vs: &[f64]) -> io::Result<()> {
    for v in vs {
        write_f64(w, *v)?;
    }
    Ok(())
}

fn fill<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => LasdiError::Format(format!("truncated payload while reading {what}")),
        _ => LasdiError::Io(e),
    })
}

pub(crate) fn read_magic<R: Read>(r: &mut R, magic: &[u8]) -> Result<()> {
    let mut buf = vec![0u8; magic.len()];
    fill(r, &mut buf, "magic")?;
    if buf != magic {
        return Err(LasdiError::Format(format!(
            "bad magic bytes {:?}, expected {:?}",
            String::from_utf8_lossy(&buf),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

pub(crate) fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    fill(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

/// Reads a count that will size an allocation; rejects absurd values early.
pub(crate) fn read_len<R: Read>(r: &mut R, what: &str) -> Result<usize> {
    let v = read_u64(r, what)?;
    if v > (1 << 40) {
        return Err(LasdiError::Format(format!("implausible {what}: {v}")));
    }
    Ok(v as usize)
}

pub(crate) fn read_f64<R: Read>(r: &mut R, what: &str) -> Result<f64> {
    let mut b = [0u8; 8];
    fill(r, &mut b, what)?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n.checked_mul(8).ok_or_else(|| LasdiError::Format(format!("{what} too large")))?];
    fill(r, &mut bytes, what)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub(crate) fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut b = [0u8; 1];
    match r.read(&mut b)? {
        0 => Ok(()),
        _ => Err(LasdiError::Format("trailing bytes after payload".into())),
    }
}
