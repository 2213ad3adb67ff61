//! Binary container shared by model checkpoints, task vectors and saliency
//! masks.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes  "HUNL"
//! version    u16      1
//! kind       u8       0 = model parameters, 1 = task vector, 2 = mask
//! reserved   u8       0
//! meta_len   u32      length of the metadata block
//! meta       meta_len bytes of UTF-8 JSON
//! count      u64      number of payload elements
//! payload    count f64 values, or ceil(count / 8) bytes of LSB-first bits
//! ```

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HUNL";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum PayloadKind {
    Model = 0,
    TaskVector = 1,
    Mask = 2,
}

impl PayloadKind {
    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(PayloadKind::Model),
            1 => Some(PayloadKind::TaskVector),
            2 => Some(PayloadKind::Mask),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Floats(Vec<f64>),
    Bits(Vec<bool>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: PayloadKind,
    pub meta: String,
    pub payload: Payload,
}

impl Container {
    pub fn encode(&self) -> Vec<u8> {
        let meta = self.meta.as_bytes();
        let mut out = Vec::with_capacity(24 + meta.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.push(0);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta);
        match &self.payload {
            Payload::Floats(values) => {
                out.extend_from_slice(&(values.len() as u64).to_le_bytes());
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Payload::Bits(bits) => {
                out.extend_from_slice(&(bits.len() as u64).to_le_bytes());
                for chunk in bits.chunks(8) {
                    let byte = chunk
                        .iter()
                        .enumerate()
                        .fold(0u8, |acc, (i, &b)| acc | ((b as u8) << i));
                    out.push(byte);
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let err = |m: &str| Error::parse(origin, m.to_string());
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4).ok_or_else(|| err("truncated header"))? != MAGIC {
            return Err(err("bad magic"));
        }
        let version = u16::from_le_bytes(cur.array().ok_or_else(|| err("truncated header"))?);
        if version != VERSION {
            return Err(err(&format!("unsupported version {version}")));
        }
        let kind_byte = cur.take(1).ok_or_else(|| err("truncated header"))?[0];
        let kind = PayloadKind::from_byte(kind_byte)
            .ok_or_else(|| err(&format!("unknown payload kind {kind_byte}")))?;
        cur.take(1).ok_or_else(|| err("truncated header"))?;
        let meta_len =
            u32::from_le_bytes(cur.array().ok_or_else(|| err("truncated header"))?) as usize;
        let meta = cur
            .take(meta_len)
            .ok_or_else(|| err("truncated metadata"))?;
        let meta = String::from_utf8(meta.to_vec()).map_err(|_| err("metadata is not UTF-8"))?;
        let count =
            u64::from_le_bytes(cur.array().ok_or_else(|| err("truncated header"))?) as usize;

        let payload = match kind {
            PayloadKind::Model | PayloadKind::TaskVector => {
                let raw = cur
                    .take(
                        count
                            .checked_mul(8)
                            .ok_or_else(|| err("payload too large"))?,
                    )
                    .ok_or_else(|| err("truncated payload"))?;
                Payload::Floats(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                        .collect(),
                )
            }
            PayloadKind::Mask => {
                let raw = cur
                    .take(count.div_ceil(8))
                    .ok_or_else(|| err("truncated payload"))?;
                Payload::Bits((0..count).map(|i| raw[i / 8] >> (i % 8) & 1 == 1).collect())
            }
        };
        if cur.pos != bytes.len() {
            return Err(err("trailing bytes after payload"));
        }
        Ok(Container {
            kind,
            meta,
            payload,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Container::decode(&bytes, path)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn array<const N: usize>(&mut self) -> Option<[u8; N]> {
        self.take(N).map(|s| s.try_into().expect("exact length"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let c = Container {
            kind: PayloadKind::Model,
            meta: "{}".into(),
            payload: Payload::Floats(vec![1.5]),
        };
        let bytes = c.encode();
        assert_eq!(&bytes[..4], b"HUNL");
        assert_eq!(bytes[6], 0);
        assert_eq!(bytes.len(), 4 + 2 + 1 + 1 + 4 + 2 + 8 + 8);
        assert_eq!(&bytes[bytes.len() - 8..], &1.5f64.to_le_bytes());
    }

    #[test]
    fn rejects_corruption() {
        let c = Container {
            kind: PayloadKind::Mask,
            meta: String::new(),
            payload: Payload::Bits(vec![true, false, true]),
        };
        let mut bytes = c.encode();
        assert!(Container::decode(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        bytes[0] = b'X';
        assert!(Container::decode(&bytes, Path::new("x")).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(floats in proptest::collection::vec(any::<f64>(), 0..40),
                      bits in proptest::collection::vec(any::<bool>(), 0..40),
                      meta in "[a-z{}\":,]{0,20}") {
            for (kind, payload) in [
                (PayloadKind::TaskVector, Payload::Floats(floats.clone())),
                (PayloadKind::Mask, Payload::Bits(bits.clone())),
            ] {
                let c = Container { kind, meta: meta.clone(), payload };
                let back = Container::decode(&c.encode(), Path::new("x")).unwrap();
                prop_assert_eq!(back.encode(), c.encode());
            }
        }
    }
}
