//! Portable tensor container used by all file IO.
//!
//! Layout: magic `TNSR`, version `u32` LE, dtype code `u8` (1 = f32),
//! rank `u8`, dims as `u32` LE, then the row-major f32 LE payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TNSR";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[DTYPE_F32])?;
    let rank = t.rank();
    if rank > u8::MAX as usize {
        return Err(Error::Shape(format!("rank {rank} exceeds container limit")));
    }
    w.write_all(&[rank as u8])?;
    for &d in t.shape() {
        if d > u32::MAX as usize {
            return Err(Error::Shape(format!("dimension {d} exceeds container limit")));
        }
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor<f32>> {
    let file = File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Data(format!("{}: truncated header", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Data(format!(
            "{}: bad magic {:?}, expected \"TNSR\"",
            path.display(),
            magic
        )));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)
        .map_err(|_| Error::Data(format!("{}: truncated version", path.display())))?;
    let version = u32::from_le_bytes(buf4);
    if version != VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported container version {version}, expected {VERSION}",
            path.display()
        )));
    }
    let mut buf1 = [0u8; 1];
    r.read_exact(&mut buf1)?;
    if buf1[0] != DTYPE_F32 {
        return Err(Error::Data(format!(
            "{}: unsupported dtype code {}, expected {DTYPE_F32} (f32)",
            path.display(),
            buf1[0]
        )));
    }
    r.read_exact(&mut buf1)?;
    let rank = buf1[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut buf4)?;
        let d = u32::from_le_bytes(buf4) as usize;
        if d == 0 {
            return Err(Error::Data(format!("{}: zero dimension", path.display())));
        }
        shape.push(d);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        r.read_exact(&mut buf4)
            .map_err(|_| Error::Data(format!("{}: truncated payload", path.display())))?;
        data.push(f32::from_le_bytes(buf4));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Data(format!(
            "{}: trailing bytes after payload",
            path.display()
        )));
    }
    Tensor::from_vec(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tns");
        let t = Tensor::<f32>::from_vec(&[2, 3], vec![0.1, -2.5, 3.0, f32::MIN_POSITIVE, 1e30, -0.0]).unwrap();
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.tns");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x01\x00").unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::Data(_))));
    }

    #[test]
    fn rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.tns");
        let t = Tensor::<f32>::zeros(&[4]);
        write_tensor(&path, &t).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::Data(_))));
    }
}
