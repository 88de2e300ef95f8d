//! Binary field snapshots.
//!
//! Layout, all little-endian: magic "LSDF", version u32 (currently 1),
//! dimension u32, nodes-per-axis u32, box length f64, then N^d samples as
//! (re, im) f64 pairs in row-major node order. Readers reject unknown
//! versions rather than guessing.

use crate::field::{ComplexField, Cx, Grid};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"LSDF";
const VERSION: u32 = 1;

pub fn write_snapshot(path: &Path, field: &ComplexField) -> crate::Result<()> {
    let mut buf = Vec::with_capacity(24 + 16 * field.values().len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(field.grid().dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(field.grid().n() as u32).to_le_bytes());
    buf.extend_from_slice(&field.grid().length().to_le_bytes());
    for z in field.values() {
        buf.extend_from_slice(&z.re.to_le_bytes());
        buf.extend_from_slice(&z.im.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> crate::Result<ComplexField> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_snapshot(&bytes)
}

fn parse_snapshot(bytes: &[u8]) -> crate::Result<ComplexField> {
    let fail = |msg: &str| crate::Error::SnapshotFormat(msg.to_string());
    if bytes.len() < 24 {
        return Err(fail("file shorter than header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail("bad magic, not a field snapshot"));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(crate::Error::SnapshotFormat(format!(
            "unsupported snapshot version {version}, reader understands {VERSION}"
        )));
    }
    let dim = u32_at(8) as usize;
    let n = u32_at(12) as usize;
    let length = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let grid = Grid::new(dim, n, length)
        .map_err(|e| crate::Error::SnapshotFormat(format!("invalid grid in header: {e}")))?;
    let count = grid.node_count();
    if bytes.len() != 24 + 16 * count {
        return Err(crate::Error::SnapshotFormat(format!(
            "expected {} sample bytes, found {}",
            16 * count,
            bytes.len() - 24
        )));
    }
    let mut values = Vec::with_capacity(count);
    for i in 0..count {
        let off = 24 + 16 * i;
        let re = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        let im = f64::from_le_bytes(bytes[off + 8..off + 16].try_into().unwrap());
        values.push(Cx::new(re, im));
    }
    ComplexField::new(grid, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::gaussian;

    #[test]
    fn roundtrip_preserves_bits() {
        let g = Grid::new(2, 16, 7.5).unwrap();
        let f = ComplexField::from_fn(g, |x| Cx::new(x[0].sin(), x[1] * 0.25));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("field.lsdf");
        write_snapshot(&p, &f).unwrap();
        let back = read_snapshot(&p).unwrap();
        assert_eq!(f.grid(), back.grid());
        assert_eq!(f.values(), back.values());
    }

    #[test]
    fn rejects_unknown_version() {
        let g = Grid::new(1, 16, 4.0).unwrap();
        let f = gaussian(g, 1.0, 1.0, &[0.0]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("field.lsdf");
        write_snapshot(&p, &f).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[4] = 2;
        std::fs::write(&p, &bytes).unwrap();
        let err = read_snapshot(&p).unwrap_err();
        assert!(err.to_string().contains("version 2"), "{err}");
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.lsdf");
        std::fs::write(&p, b"JUNKxxxxxxxxxxxxxxxxxxxxxxxx").unwrap();
        assert!(read_snapshot(&p).is_err());

        let g = Grid::new(1, 16, 4.0).unwrap();
        let f = gaussian(g, 1.0, 1.0, &[0.0]);
        let p2 = dir.path().join("trunc.lsdf");
        write_snapshot(&p2, &f).unwrap();
        let bytes = std::fs::read(&p2).unwrap();
        std::fs::write(&p2, &bytes[..bytes.len() - 8]).unwrap();
        assert!(read_snapshot(&p2).is_err());
    }
}
