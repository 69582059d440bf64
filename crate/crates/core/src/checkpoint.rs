//! Binary named-tensor container.
//!
//! Layout, all little-endian: magic `DFFT`, `u32` version (1), `u32` tensor
//! count, then per tensor `u16` name length, UTF-8 name, `u8` rank,
//! `rank × u32` dims and `Π dims × f32` row-major payload. Tensors are written
//! in lexicographic name order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DFFT";
pub const VERSION: u32 = 1;

pub fn encode<S: Scalar>(params: &ParamSet<S>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(12 + params.num_scalars() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        let name_len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Format(format!("rank too large: {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension too large: {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<ParamSet<S>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("payload overflow".into()))?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| S::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        if params.contains(&name) {
            return Err(Error::Format(format!("duplicate tensor `{name}`")));
        }
        params.insert(name, Tensor::new(shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(params)
}

pub fn save<S: Scalar>(path: &Path, params: &ParamSet<S>) -> Result<()> {
    fs::write(path, encode(params)?).map_err(|e| Error::io(path, e))
}

pub fn load<S: Scalar>(path: &Path) -> Result<ParamSet<S>> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_layout_is_exact() {
        let mut p = ParamSet::<f32>::new();
        p.insert("ab", Tensor::new(vec![2], vec![1.0, -2.5]).unwrap());
        let bytes = encode(&p).unwrap();
        let mut want = b"DFFT".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u16.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.push(1);
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn rejects_corrupt_input() {
        let mut p = ParamSet::<f32>::new();
        p.insert("x", Tensor::zeros(&[2, 2]));
        let bytes = encode(&p).unwrap();
        assert!(decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<f32>(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode::<f32>(&extra).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            tensors in prop::collection::btree_map(
                "[a-z][a-z0-9._]{0,12}",
                prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 0..20),
                0..5,
            )
        ) {
            let mut p = ParamSet::<f32>::new();
            for (k, v) in &tensors {
                p.insert(k.clone(), Tensor::new(vec![v.len()], v.clone()).unwrap());
            }
            let bytes = encode(&p).unwrap();
            let back = decode::<f32>(&bytes).unwrap();
            prop_assert_eq!(encode(&back).unwrap(), bytes);
            for (k, t) in p.iter() {
                let b = back.get(k).unwrap();
                prop_assert!(t.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }
}
