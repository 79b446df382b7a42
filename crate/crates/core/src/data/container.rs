//! The on-disk binary array container ("NFSB").
//!
//! Layout, all integers little-endian:
//! - magic bytes `NFSB`, u32 version, u32 tensor count
//! - per tensor: u32 name length, UTF-8 name, u8 dtype tag (0 = f64,
//!   1 = u32), u8 rank, rank x u64 dims, raw payload.
//!
//! Round trips are bit-exact; f64 payloads are stored as raw IEEE bits.

use super::DataError;
use crate::tensor::Tensor;
use std::fs;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"NFSB";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    U32(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

/// An ordered collection of named arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    arrays: Vec<NamedArray>,
}

impl Container {
    pub fn new() -> Self {
        Container::default()
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn arrays(&self) -> &[NamedArray] {
        &self.arrays
    }

    pub fn push_f64(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f64>,
    ) -> Result<(), DataError> {
        let name = name.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(DataError::SizeMismatch { name, expected: n, got: data.len() });
        }
        self.arrays.push(NamedArray { name, shape, data: ArrayData::F64(data) });
        Ok(())
    }

    pub fn push_u32(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<u32>,
    ) -> Result<(), DataError> {
        let name = name.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(DataError::SizeMismatch { name, expected: n, got: data.len() });
        }
        self.arrays.push(NamedArray { name, shape, data: ArrayData::U32(data) });
        Ok(())
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor) -> Result<(), DataError> {
        self.push_f64(name, t.shape().to_vec(), t.data().to_vec())
    }

    /// UTF-8 text stored as a u32 byte array (used for JSON config blobs).
    pub fn push_text(&mut self, name: impl Into<String>, text: &str) -> Result<(), DataError> {
        let bytes: Vec<u32> = text.bytes().map(u32::from).collect();
        let n = bytes.len();
        self.push_u32(name, vec![n], bytes)
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor, DataError> {
        let a = self.get(name).ok_or_else(|| DataError::MissingArray(name.into()))?;
        match &a.data {
            ArrayData::F64(v) => {
                Tensor::new(a.shape.clone(), v.clone()).map_err(|e| DataError::Invalid(e.to_string()))
            }
            ArrayData::U32(_) => Err(DataError::WrongType { name: name.into(), expected: "f64" }),
        }
    }

    pub fn u32s(&self, name: &str) -> Result<&[u32], DataError> {
        let a = self.get(name).ok_or_else(|| DataError::MissingArray(name.into()))?;
        match &a.data {
            ArrayData::U32(v) => Ok(v),
            ArrayData::F64(_) => Err(DataError::WrongType { name: name.into(), expected: "u32" }),
        }
    }

    pub fn text(&self, name: &str) -> Result<String, DataError> {
        let raw = self.u32s(name)?;
        let bytes: Vec<u8> = raw
            .iter()
            .map(|&v| u8::try_from(v).map_err(|_| DataError::Invalid(format!("{name}: non-byte value"))))
            .collect::<Result<_, _>>()?;
        String::from_utf8(bytes).map_err(|_| DataError::Invalid(format!("{name}: invalid UTF-8")))
    }

    /// FNV-1a hash of the serialized bytes; for change detection only.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            let tag: u8 = match a.data {
                ArrayData::F64(_) => 0,
                ArrayData::U32(_) => 1,
            };
            out.push(tag);
            out.push(a.shape.len() as u8);
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &a.data {
                ArrayData::F64(v) => {
                    for &x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                ArrayData::U32(v) => {
                    for &x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(DataError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(DataError::UnsupportedVersion(version));
        }
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| DataError::Invalid("array name is not UTF-8".into()))?;
            let tag = r.u8()?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let data = match tag {
                0 => {
                    let raw = r.take(numel * 8)?;
                    ArrayData::F64(
                        raw.chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                1 => {
                    let raw = r.take(numel * 4)?;
                    ArrayData::U32(
                        raw.chunks_exact(4)
                            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                other => return Err(DataError::Invalid(format!("unknown dtype tag {other}"))),
            };
            arrays.push(NamedArray { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(DataError::Invalid(format!(
                "{} trailing bytes after last array",
                bytes.len() - r.pos
            )));
        }
        Ok(Container { arrays })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        if let Some(parent) = path.as_ref().parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let bytes = fs::read(&path).map_err(|e| {
            DataError::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.as_ref().display()),
            ))
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.pos + n > self.bytes.len() {
            return Err(DataError::Truncated { at: self.pos, wanted: n });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DataError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut c = Container::new();
        let floats = vec![0.1, -0.0, f64::MIN_POSITIVE, 1.0 / 3.0, 6.02e23, -7.25];
        c.push_f64("a/b", vec![2, 3], floats.clone()).unwrap();
        c.push_u32("idx", vec![4], vec![0, 7, u32::MAX, 42]).unwrap();
        c.push_text("meta", "{\"k\":1}").unwrap();
        let bytes = c.to_bytes();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        // The f64 payload preserves bits, including -0.0.
        match &back.get("a/b").unwrap().data {
            ArrayData::F64(v) => {
                for (x, y) in v.iter().zip(&floats) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
            _ => panic!(),
        }
        assert_eq!(back.text("meta").unwrap(), "{\"k\":1}");
        // And the serialization itself is reproducible.
        assert_eq!(bytes, back.to_bytes());
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(matches!(Container::from_bytes(b"XXXX"), Err(DataError::BadMagic)));
    }

    #[test]
    fn truncation_rejected() {
        let mut c = Container::new();
        c.push_f64("x", vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = c.to_bytes();
        assert!(matches!(
            Container::from_bytes(&bytes[..bytes.len() - 5]),
            Err(DataError::Truncated { .. })
        ));
    }

    #[test]
    fn declared_size_must_match_payload() {
        let mut c = Container::new();
        assert!(c.push_f64("x", vec![2, 2], vec![1.0]).is_err());
    }
}
