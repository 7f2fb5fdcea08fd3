//! MATD binary tensor dumps.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MATD" | version: u32 = 1 | rank: u32 | extents: rank × u32 | dtype: u8 | payload
//! ```
//!
//! `dtype` is `0x08` for f64 or `0x04` for f32; the payload is the row-major
//! data in that IEEE-754 format, little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

pub const MAGIC: &[u8; 4] = b"MATD";
pub const VERSION: u32 = 1;

pub fn encode(t: &Tensor, precision: Precision) -> Vec<u8> {
    let width = match precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    };
    let mut buf = Vec::with_capacity(13 + 4 * t.rank() + width * t.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    buf.push(precision.dtype_byte());
    for &v in t.data() {
        match precision {
            Precision::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
            Precision::F64 => buf.extend_from_slice(&v.to_le_bytes()),
        }
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated MATD stream at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Decodes one tensor from the front of `bytes`, returning it with its
/// stored precision and the number of bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Tensor, Precision, usize)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, expected MATD".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported MATD version {version}")));
    }
    let rank = c.u32()? as usize;
    if rank == 0 {
        return Err(Error::Format("rank must be positive".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(c.u32()? as usize);
    }
    let dtype = c.take(1)?[0];
    let precision = Precision::from_dtype_byte(dtype)
        .ok_or_else(|| Error::Format(format!("unknown dtype byte {dtype:#04x}")))?;
    let len: usize = shape.iter().product();
    let data = match precision {
        Precision::F64 => c
            .take(8 * len)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect(),
        Precision::F32 => c
            .take(4 * len)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
    };
    let t = Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?;
    Ok((t, precision, c.pos))
}

pub fn decode(bytes: &[u8]) -> Result<(Tensor, Precision)> {
    let (t, p, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after MATD payload",
            bytes.len() - used
        )));
    }
    Ok((t, p))
}

pub fn write(path: impl AsRef<Path>, t: &Tensor, precision: Precision) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(t, precision))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<(Tensor, Precision)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let b = encode(&t, Precision::F64);
        assert_eq!(&b[..4], b"MATD");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &[2, 0, 0, 0]);
        assert_eq!(&b[12..16], &[2, 0, 0, 0]);
        assert_eq!(&b[16..20], &[1, 0, 0, 0]);
        assert_eq!(b[20], 0x08);
        assert_eq!(&b[21..29], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 21 + 16);
        assert_eq!(encode(&t, Precision::F32).len(), 21 + 8);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::ones(&[3]);
        let mut b = encode(&t, Precision::F64);
        b[0] = b'X';
        assert!(matches!(decode(&b), Err(Error::Format(_))));
        let mut b = encode(&t, Precision::F64);
        b[4] = 2;
        assert!(decode(&b).is_err());
        let mut b = encode(&t, Precision::F64);
        b[16] = 0x02;
        assert!(decode(&b).is_err());
        let b = encode(&t, Precision::F64);
        assert!(decode(&b[..b.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn f64_roundtrip_is_bit_exact(
            shape in prop::collection::vec(1usize..5, 1..4),
            seed in any::<u64>(),
        ) {
            let mut rng = crate::rng::SplitMix64::new(seed);
            let len: usize = shape.iter().product();
            let data: Vec<f64> = (0..len).map(|_| rng.normal() * 1e3).collect();
            let t = Tensor::new(shape, data).unwrap();
            let (back, p) = decode(&encode(&t, Precision::F64)).unwrap();
            prop_assert_eq!(p, Precision::F64);
            let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same && back.shape() == t.shape());
        }

        #[test]
        fn f32_roundtrip_matches_rounding(seed in any::<u64>()) {
            let mut rng = crate::rng::SplitMix64::new(seed);
            let t = Tensor::from_fn(&[7], |_| rng.normal());
            let (back, _) = decode(&encode(&t, Precision::F32)).unwrap();
            prop_assert_eq!(back, t.round_to(Precision::F32));
        }
    }
}
