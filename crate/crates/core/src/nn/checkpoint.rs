//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SRRL"            4-byte magic
//! version           u32
//! repeated until EOF:
//!   name_len        u32
//!   name            name_len bytes, UTF-8
//!   rank            u32
//!   dims            rank × u64
//!   payload         product(dims) × f64
//! ```

use std::io::{Read, Write};

use super::tensor::{ParamStore, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SRRL";
pub const VERSION: u32 = 1;

/// Ordered list of named tensors.
pub type NamedTensors = Vec<(String, Tensor)>;

pub fn write_checkpoint<W: Write>(mut w: W, tensors: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.data.len() * 8);
        for x in &t.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32> {
    let b = bytes
        .get(*pos..*pos + 4)
        .ok_or_else(|| Error::Checkpoint("truncated u32".into()))?;
    *pos += 4;
    Ok(u32::from_le_bytes(b.try_into().unwrap()))
}

fn read_u64(bytes: &[u8], pos: &mut usize) -> Result<u64> {
    let b = bytes
        .get(*pos..*pos + 8)
        .ok_or_else(|| Error::Checkpoint("truncated u64".into()))?;
    *pos += 8;
    Ok(u64::from_le_bytes(b.try_into().unwrap()))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<NamedTensors> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut pos = 4;
    let version = read_u32(&bytes, &mut pos)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while pos < bytes.len() {
        let len = read_u32(&bytes, &mut pos)? as usize;
        let name = bytes
            .get(pos..pos + len)
            .ok_or_else(|| Error::Checkpoint("truncated name".into()))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        pos += len;
        let rank = read_u32(&bytes, &mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&bytes, &mut pos)? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = bytes
            .get(pos..pos + n * 8)
            .ok_or_else(|| Error::Checkpoint(format!("truncated payload for {name}")))?;
        pos += n * 8;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data)?;
        out.push((name, t));
    }
    Ok(out)
}

/// Prefixes every parameter name of `store` with `prefix.`.
pub fn export_store(prefix: &str, store: &ParamStore) -> NamedTensors {
    store
        .iter()
        .map(|(n, t)| {
            let mut t = t.clone();
            t.grad = None;
            (format!("{prefix}.{n}"), t)
        })
        .collect()
}

/// Loads values for `store` from tensors named `prefix.<param>`. Every
/// parameter must be present with a matching shape.
pub fn import_store(prefix: &str, store: &mut ParamStore, tensors: &[(String, Tensor)]) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let full = format!("{prefix}.{}", store.name(id));
        let (_, t) = tensors
            .iter()
            .find(|(n, _)| *n == full)
            .ok_or_else(|| Error::Mismatch(format!("missing tensor {full}")))?;
        let dst = store.get_mut(id);
        if dst.shape != t.shape {
            return Err(Error::Mismatch(format!(
                "{full}: checkpoint {:?} vs model {:?}",
                t.shape, dst.shape
            )));
        }
        dst.data.copy_from_slice(&t.data);
    }
    Ok(())
}

/// Builds a fresh store from every tensor under `prefix.`.
pub fn store_from(prefix: &str, tensors: &[(String, Tensor)]) -> ParamStore {
    let mut store = ParamStore::new();
    let p = format!("{prefix}.");
    for (n, t) in tensors {
        if let Some(rest) = n.strip_prefix(&p) {
            store.push_raw(rest.to_string(), t.clone());
        }
    }
    store
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_bytes() {
        let mut buf = Vec::new();
        let t = Tensor::new(vec![1], vec![1.0]).unwrap();
        write_checkpoint(&mut buf, &[("a".into(), t)]).unwrap();
        assert_eq!(&buf[..4], b"SRRL");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(buf[12], b'a');
        assert_eq!(&buf[13..17], &1u32.to_le_bytes());
        assert_eq!(&buf[17..25], &1u64.to_le_bytes());
        assert_eq!(&buf[25..33], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), 33);
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(read_checkpoint(&b"NOPE\x01\0\0\0"[..]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
            let data: Vec<f64> = (0..rows * cols)
                .map(|i| f64::from_bits(seed.rotate_left(i as u32) & 0x3fef_ffff_ffff_ffff))
                .collect();
            let t = Tensor::new(vec![rows, cols], data).unwrap();
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &[("w".into(), t.clone())]).unwrap();
            let back = read_checkpoint(&buf[..]).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(&back[0].1.shape, &t.shape);
            prop_assert_eq!(&back[0].1.data, &t.data);
        }
    }
}
