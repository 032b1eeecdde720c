//! Little-endian binary read/write helpers shared by the file formats.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn write_bytes(w: &mut impl Write, path: &Path, bytes: &[u8]) -> Result<()> {
    w.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_u16(w: &mut impl Write, path: &Path, v: u16) -> Result<()> {
    write_bytes(w, path, &v.to_le_bytes())
}

pub(crate) fn write_u32(w: &mut impl Write, path: &Path, v: u32) -> Result<()> {
    write_bytes(w, path, &v.to_le_bytes())
}

pub(crate) fn write_u64(w: &mut impl Write, path: &Path, v: u64) -> Result<()> {
    write_bytes(w, path, &v.to_le_bytes())
}

pub(crate) fn write_f64(w: &mut impl Write, path: &Path, v: f64) -> Result<()> {
    write_bytes(w, path, &v.to_le_bytes())
}

fn read_exact(r: &mut impl Read, path: &Path, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Malformed {
                path: path.to_path_buf(),
                reason: "truncated file".into(),
            }
        } else {
            Error::io(path, e)
        }
    })
}

pub(crate) fn read_u8(r: &mut impl Read, path: &Path) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact(r, path, &mut b)?;
    Ok(b[0])
}

pub(crate) fn read_u16(r: &mut impl Read, path: &Path) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, path, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

pub(crate) fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, path, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, path, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64(r: &mut impl Read, path: &Path) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, path, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn expect_magic(r: &mut impl Read, path: &Path, magic: &'static str) -> Result<()> {
    let mut buf = vec![0u8; magic.len()];
    read_exact(r, path, &mut buf)?;
    if buf != magic.as_bytes() {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
        });
    }
    Ok(())
}

pub(crate) fn expect_version(
    r: &mut impl Read,
    path: &Path,
    supported: u16,
) -> Result<()> {
    let found = read_u16(r, path)?;
    if found != supported {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found,
            supported,
        });
    }
    Ok(())
}
