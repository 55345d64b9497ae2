//! `HCUB` cube files: magic `HCUB`, u16 version, four u32 dims (T, C, H, W),
//! then `T·C·H·W` f32 values in C order. All integers and floats are
//! little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const HCUB_MAGIC: [u8; 4] = *b"HCUB";
pub const HCUB_VERSION: u16 = 1;

/// Largest element count accepted from a header (guards against
/// allocating from a corrupt dims field).
const MAX_ELEMENTS: u64 = 1 << 31;

pub fn write_hcub_to<W: Write>(mut w: W, dims: [usize; 4], data: &[f32]) -> Result<()> {
    let n: usize = dims.iter().product();
    if data.len() != n {
        return Err(Error::Dimension(format!(
            "cube {dims:?} needs {n} values, got {}",
            data.len()
        )));
    }
    let mut buf = Vec::with_capacity(22 + 4 * n);
    buf.extend_from_slice(&HCUB_MAGIC);
    buf.extend_from_slice(&HCUB_VERSION.to_le_bytes());
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Dimension(format!("dim {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
        .map_err(|e| Error::Format(format!("cube write failed: {e}")))
}

pub fn write_hcub(path: &Path, dims: [usize; 4], data: &[f32]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_hcub_to(&mut w, dims, data)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_hcub_from<R: Read>(mut r: R) -> Result<([usize; 4], Vec<f32>)> {
    let mut header = [0u8; 22];
    r.read_exact(&mut header)
        .map_err(|_| Error::Corrupt("cube header truncated".into()))?;
    if header[..4] != HCUB_MAGIC {
        return Err(Error::Format(format!(
            "bad cube magic {:02x?}",
            &header[..4]
        )));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != HCUB_VERSION {
        return Err(Error::Version {
            found: version as u32,
            expected: HCUB_VERSION as u32,
        });
    }
    let mut dims = [0usize; 4];
    let mut count: u64 = 1;
    for (i, d) in dims.iter_mut().enumerate() {
        let off = 6 + 4 * i;
        let v = u32::from_le_bytes(header[off..off + 4].try_into().unwrap());
        if v == 0 {
            return Err(Error::Corrupt("cube has a zero dimension".into()));
        }
        *d = v as usize;
        count = count.saturating_mul(v as u64);
    }
    if count > MAX_ELEMENTS {
        return Err(Error::Corrupt(format!("cube dims {dims:?} are implausibly large")));
    }
    let mut bytes = vec![0u8; count as usize * 4];
    r.read_exact(&mut bytes).map_err(|_| {
        Error::Corrupt(format!("cube payload truncated; expected {count} values"))
    })?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).unwrap_or(0) != 0 {
        return Err(Error::Corrupt("trailing bytes after cube payload".into()));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dims, data))
}

pub fn read_hcub(path: &Path) -> Result<([usize; 4], Vec<f32>)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_hcub_from(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let mut buf = Vec::new();
        write_hcub_to(&mut buf, [1, 1, 1, 2], &[1.0, -2.5]).unwrap();
        assert_eq!(&buf[..4], &[0x48, 0x43, 0x55, 0x42]);
        assert_eq!(&buf[4..6], &[1, 0]);
        assert_eq!(&buf[6..10], &[1, 0, 0, 0]);
        assert_eq!(&buf[18..22], &[2, 0, 0, 0]);
        assert_eq!(&buf[22..26], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 30);
        let (dims, data) = read_hcub_from(buf.as_slice()).unwrap();
        assert_eq!(dims, [1, 1, 1, 2]);
        assert_eq!(data, vec![1.0, -2.5]);
    }

    #[test]
    fn rejects_bad_files() {
        let mut buf = Vec::new();
        write_hcub_to(&mut buf, [1, 2, 2, 2], &[0.5; 8]).unwrap();
        assert!(matches!(
            read_hcub_from(&buf[..buf.len() - 1]),
            Err(Error::Corrupt(_))
        ));
        let mut wrong_version = buf.clone();
        wrong_version[4] = 2;
        assert!(matches!(
            read_hcub_from(wrong_version.as_slice()),
            Err(Error::Version { found: 2, expected: 1 })
        ));
        let mut wrong_magic = buf.clone();
        wrong_magic[0] = b'X';
        assert!(matches!(read_hcub_from(wrong_magic.as_slice()), Err(Error::Format(_))));
        assert!(write_hcub_to(&mut Vec::new(), [1, 1, 1, 3], &[0.0]).is_err());
    }
}
