//! Binary parameter snapshots.
//!
//! Layout, all little-endian: magic `GVSECKPT`, `u32` version, `u32` digest
//! length and the digest bytes, `u32` tensor count, then per tensor a `u32`
//! rank, `u64` dims and `f64` values, in declaration order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"GVSECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub digest: String,
    pub tensors: Vec<Tensor>,
}

pub fn write_checkpoint(path: &Path, digest: &str, store: &ParamStore) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + digest.len() + 8 * store.num_scalars());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(digest.len() as u32).to_le_bytes());
    buf.extend_from_slice(digest.as_bytes());
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        buf.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Artifact("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Artifact(format!("{} is not a checkpoint", path.display())));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Artifact(format!("unsupported checkpoint version {version}")));
    }
    let n = c.u32()? as usize;
    let digest = String::from_utf8(c.take(n)?.to_vec())
        .map_err(|_| Error::Artifact("checkpoint digest is not UTF-8".into()))?;
    let count = c.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = c.take(len.checked_mul(8).ok_or_else(|| Error::Artifact("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(shape, data).map_err(|e| Error::Artifact(format!("bad tensor: {e}")))?);
    }
    if c.pos != bytes.len() {
        return Err(Error::Artifact("trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint { version, digest, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut store = ParamStore::new();
        store.add("a", Tensor::new(vec![2, 3], vec![0.1, -2.5, 1e-300, 3.0, 7.25, -0.0]).unwrap());
        store.add("b", Tensor::scalar(std::f64::consts::PI));
        write_checkpoint(&path, "abc123", &store).unwrap();
        let ck = read_checkpoint(&path).unwrap();
        assert_eq!(ck.digest, "abc123");
        assert_eq!(ck.tensors.len(), 2);
        for ((_, p), t) in store.iter().zip(&ck.tensors) {
            assert_eq!(p.value.shape(), t.shape());
            let a: Vec<u64> = p.value.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        fs::write(&path, b"GVSECKPT\x01\x00").unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Artifact(_))));
        fs::write(&path, b"nothing").unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Artifact(_))));
    }
}
