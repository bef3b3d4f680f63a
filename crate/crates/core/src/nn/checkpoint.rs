//! Binary parameter container.
//!
//! ```text
//! magic      8 bytes  "AVGCKPT\0"
//! version    u32      1
//! meta_len   u32      byte length of the metadata block
//! meta       UTF-8 JSON (model kind, spec, loss, class count, ...)
//! count      u32      number of tensors
//! table      count × { name_len u16, name bytes, ndim u8, ndim × dim u32 }
//! payload    every tensor's values as f32, in table order
//! ```
//!
//! All integers and floats are little-endian.

use std::io::{Read, Write};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"AVGCKPT\0";
pub const VERSION: u32 = 1;

fn io_err(e: std::io::Error) -> Error {
    Error::Checkpoint(e.to_string())
}

pub fn write_checkpoint(
    mut w: impl Write,
    meta: &serde_json::Value,
    tensors: &[(String, Tensor)],
) -> Result<()> {
    let meta = serde_json::to_vec(meta)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(t.shape().len() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for (_, t) in tensors {
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    w.write_all(&buf).map_err(io_err)
}

struct Cursor<'a>(&'a [u8]);

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.0.len() < n {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let (a, b) = self.0.split_at(n);
        self.0 = b;
        Ok(a)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_checkpoint(mut r: impl Read) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(io_err)?;
    let mut c = Cursor(&bytes);
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = c.u32()? as usize;
    let meta: serde_json::Value = serde_json::from_slice(c.take(meta_len)?)?;
    let count = c.u32()? as usize;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(c.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let ndim = c.take(1)?[0] as usize;
        let shape = (0..ndim).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        table.push((name, shape));
    }
    let mut out = Vec::with_capacity(count);
    for (name, shape) in table {
        let n: usize = shape.iter().product();
        let raw = c.take(4 * n)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    if !c.0.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", c.0.len())));
    }
    Ok((meta, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_at_f32_precision() {
        let t = Tensor::from_vec(&[2, 3], vec![0.5, -1.25, 3.0, 1e-3, 7.0, 0.1]).unwrap();
        let meta = serde_json::json!({"kind": "test", "classes": 4});
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &meta, &[("w".into(), t.clone())]).unwrap();
        let (m, ts) = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(m, meta);
        assert_eq!(ts[0].0, "w");
        assert_eq!(ts[0].1.shape(), t.shape());
        for (a, b) in ts[0].1.data().iter().zip(t.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn rejects_corruption() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &serde_json::json!({}), &[("b".into(), Tensor::zeros(&[4]))]).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
        buf[0] = b'X';
        assert!(read_checkpoint(&buf[..]).is_err());
    }
}
