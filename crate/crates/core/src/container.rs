//! `NCT1` named-tensor container.
//!
//! Layout (little-endian): magic `NCT1`, `u32` tensor count, then per
//! tensor: `u32` name length, UTF-8 name, `u8` dtype tag (0 = f64,
//! 1 = i64), `u32` rank, `rank` × `u64` extents, row-major payload.
//! String metadata is stored as rank-1 i64 tensors of UTF-8 bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"NCT1";
const DTYPE_F64: u8 = 0;
const DTYPE_I64: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    F64(Tensor),
    I64 { shape: Vec<usize>, data: Vec<i64> },
}

impl Entry {
    pub fn shape(&self) -> &[usize] {
        match self {
            Entry::F64(t) => t.shape(),
            Entry::I64 { shape, .. } => shape,
        }
    }
}

/// Insertion-ordered named tensors; serialization is byte-deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    entries: Vec<(String, Entry)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Entry)> {
        self.entries.iter().map(|(n, e)| (n.as_str(), e))
    }

    fn put(&mut self, name: &str, entry: Entry) {
        if let Some(slot) = self.entries.iter_mut().find(|(n, _)| n == name) {
            slot.1 = entry;
        } else {
            self.entries.push((name.to_string(), entry));
        }
    }

    pub fn put_f64(&mut self, name: &str, t: Tensor) {
        self.put(name, Entry::F64(t));
    }

    pub fn put_i64(&mut self, name: &str, shape: &[usize], data: Vec<i64>) -> Result<()> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("i64 payload has {} elements", data.len()),
            });
        }
        self.put(
            name,
            Entry::I64 {
                shape: shape.to_vec(),
                data,
            },
        );
        Ok(())
    }

    pub fn put_indices(&mut self, name: &str, idx: &[usize]) {
        let data = idx.iter().map(|&i| i as i64).collect();
        self.put(
            name,
            Entry::I64 {
                shape: vec![idx.len()],
                data,
            },
        );
    }

    pub fn put_str(&mut self, name: &str, value: &str) {
        let data: Vec<i64> = value.bytes().map(i64::from).collect();
        self.put(
            name,
            Entry::I64 {
                shape: vec![data.len()],
                data,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    pub fn f64(&self, name: &str) -> Result<&Tensor> {
        match self.get(name) {
            Some(Entry::F64(t)) => Ok(t),
            _ => Err(Error::MissingTensor(name.to_string())),
        }
    }

    pub fn i64(&self, name: &str) -> Result<(&[usize], &[i64])> {
        match self.get(name) {
            Some(Entry::I64 { shape, data }) => Ok((shape, data)),
            _ => Err(Error::MissingTensor(name.to_string())),
        }
    }

    pub fn indices(&self, name: &str) -> Result<Vec<usize>> {
        let (_, data) = self.i64(name)?;
        data.iter()
            .map(|&v| usize::try_from(v).map_err(|_| Error::invalid(format!("negative index in `{name}`"))))
            .collect()
    }

    pub fn str(&self, name: &str) -> Result<String> {
        let (_, data) = self.i64(name)?;
        let bytes: Vec<u8> = data.iter().map(|&b| b as u8).collect();
        String::from_utf8(bytes).map_err(|_| Error::invalid(format!("`{name}` is not UTF-8")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let (tag, shape) = match entry {
                Entry::F64(t) => (DTYPE_F64, t.shape()),
                Entry::I64 { shape, .. } => (DTYPE_I64, shape.as_slice()),
            };
            out.push(tag);
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &e in shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            match entry {
                Entry::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Entry::I64 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("bad magic".into());
        }
        let count = r.u32()? as usize;
        let mut c = Container::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| "tensor name is not UTF-8".to_string())?
                .to_string();
            let tag = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|v| v as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let payload = r.take(n.checked_mul(8).ok_or("payload size overflow")?)?;
            let entry = match tag {
                DTYPE_F64 => {
                    let data = payload
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                        .collect();
                    Entry::F64(Tensor::new(&shape, data).map_err(|e| e.to_string())?)
                }
                DTYPE_I64 => Entry::I64 {
                    shape,
                    data: payload
                        .chunks_exact(8)
                        .map(|b| i64::from_le_bytes(b.try_into().unwrap()))
                        .collect(),
                },
                other => return Err(format!("unknown dtype tag {other} for `{name}`")),
            };
            c.entries.push((name, entry));
        }
        if r.pos != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - r.pos));
        }
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|reason| Error::Format {
            path: path.to_path_buf(),
            reason,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let mut c = Container::new();
        c.put_f64("x", Tensor::new(&[2], vec![1.0, -0.5]).unwrap());
        let b = c.to_bytes();
        assert_eq!(&b[0..4], b"NCT1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(b[12], b'x');
        assert_eq!(b[13], 0);
        assert_eq!(u32::from_le_bytes(b[14..18].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[18..26].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(b[26..34].try_into().unwrap()), 1.0);
        assert_eq!(b.len(), 42);
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let mut c = Container::new();
        c.put_str("stage", "pretrain");
        let b = c.to_bytes();
        assert!(Container::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Container::from_bytes(&bad).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(vals in proptest::collection::vec(-1e6f64..1e6, 0..40), ints in proptest::collection::vec(any::<i64>(), 0..10), s in "[a-z=0-9]{0,12}") {
            let mut c = Container::new();
            c.put_f64("a/f", Tensor::new(&[vals.len()], vals.clone()).unwrap());
            c.put_i64("b.i", &[ints.len()], ints.clone()).unwrap();
            c.put_str("meta.s", &s);
            c.put_f64("scalar", Tensor::scalar(3.5));
            let back = Container::from_bytes(&c.to_bytes()).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.str("meta.s").unwrap(), s);
        }
    }
}
