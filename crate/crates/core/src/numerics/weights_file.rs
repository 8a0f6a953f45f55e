//! The `MASW1` tensor container.
//!
//! ```text
//! "MASW1" | dtype u8 (0 = f32, 1 = f64) | count u64
//! count × { name_len u64 | name utf-8 | rank u64 | rank × extent u64 | payload }
//! ```
//! Integers and payload elements are little-endian.

use std::path::Path;

use super::real::{DType, Real};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"MASW1";

pub fn encode<T: Real>(entries: &[(String, &Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.tag());
    out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows usize".into()))
    }
}

/// Decodes a container, converting the stored element type to `T` if needed.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let tag = r.take(1)?[0];
    let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown dtype tag {tag}")))?;
    let count = r.usize()?;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.usize()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not utf-8".into()))?
            .to_string();
        let rank = r.usize()?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.usize()?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Format(format!("{name}: extent overflow")))?;
        let data: Vec<T> = match dtype {
            DType::F32 => r
                .take(n.checked_mul(4).ok_or_else(|| Error::Format("payload overflow".into()))?)?
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => r
                .take(n.checked_mul(8).ok_or_else(|| Error::Format("payload overflow".into()))?)?
                .chunks_exact(8)
                .map(|c| T::from_f64(f64::read_le(c)))
                .collect(),
        };
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn write<T: Real>(path: &Path, entries: &[(String, &Tensor<T>)]) -> Result<()> {
    std::fs::write(path, encode(entries)).map_err(|e| Error::io(path, e))
}

pub fn read<T: Real>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let t = Tensor::<f32>::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let bytes = encode(&[("w".to_string(), &t)]);
        let mut expected = b"MASW1".to_vec();
        expected.push(0);
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.push(b'w');
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn round_trip_and_widening() {
        let t = Tensor::<f32>::new(vec![2, 3], vec![0.5, 1.0, 2.0, -1.0, 3.25, 7.0]).unwrap();
        let bytes = encode(&[("a.b".to_string(), &t)]);
        let back: Vec<(String, Tensor<f32>)> = decode(&bytes).unwrap();
        assert_eq!(back[0].0, "a.b");
        assert_eq!(back[0].1, t);
        let wide: Vec<(String, Tensor<f64>)> = decode(&bytes).unwrap();
        assert_eq!(wide[0].1.data()[4], 3.25);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::<f64>::zeros(&[4]);
        let mut bytes = encode(&[("x".to_string(), &t)]);
        assert!(matches!(decode::<f64>(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(decode::<f64>(&bytes), Err(Error::Format(_))));
    }
}
