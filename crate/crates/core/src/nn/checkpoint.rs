//! `L2SP` parameter checkpoints.
//!
//! Layout (all integers little-endian `u32`): magic `L2SP`, format
//! version, entry count, then per entry the UTF-8 name (length-prefixed),
//! rank, extents, and the `f32` LE payload in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"L2SP";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(store: &ParamStore, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &e in shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for v in p.tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::format("L2SP", format!("truncated: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

/// Reads a checkpoint; tensors come back with `requires_grad = false`.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::format("L2SP", "missing magic"))?;
    if &magic != MAGIC {
        return Err(Error::format("L2SP", format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::format("L2SP", format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|_| Error::format("L2SP", "truncated name"))?;
        let name = String::from_utf8(name).map_err(|_| Error::format("L2SP", "name is not UTF-8"))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(&mut r).map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)
            .map_err(|_| Error::format("L2SP", format!("truncated data for `{name}`")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.insert(name, Tensor::new(shape, data)?)?;
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(store, BufWriter::new(File::create(path)?))
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

/// Overwrites every parameter of `store` from the checkpoint at `path`.
/// Missing names or shape mismatches are errors; trainable flags are kept.
pub fn load_into(store: &mut ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let loaded = load(path)?;
    restore(store, &loaded)
}

pub fn restore(store: &mut ParamStore, loaded: &ParamStore) -> Result<()> {
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        let src = loaded.get(loaded.id(&name)?);
        if src.shape() != store.get(id).shape() {
            return Err(Error::shape(
                "checkpoint",
                format!("`{name}`: stored {:?}, model {:?}", src.shape(), store.get(id).shape()),
            ));
        }
        store.get_mut(id).data_mut().copy_from_slice(src.data());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_checkpoint(&b"NOPE\x01\0\0\0"[..]).is_err());
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&s, &mut buf).unwrap();
        buf.truncate(buf.len() - 1);
        assert!(read_checkpoint(&buf[..]).is_err());
    }

    #[test]
    fn layout_is_as_documented() {
        let mut s = ParamStore::new();
        s.insert("ab", Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap()).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&s, &mut buf).unwrap();
        let mut expect = b"L2SP".to_vec();
        for v in [1u32, 1, 2] {
            expect.extend(v.to_le_bytes());
        }
        expect.extend(b"ab");
        for v in [2u32, 1, 2] {
            expect.extend(v.to_le_bytes());
        }
        expect.extend(1.0f32.to_le_bytes());
        expect.extend((-2.0f32).to_le_bytes());
        assert_eq!(buf, expect);
    }
}
