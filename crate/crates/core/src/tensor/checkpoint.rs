//! Binary checkpoint format.
//!
//! ```text
//! "CBODD01"
//! repeated: name_len u32 | name utf-8 | rank u32 | extents u32 × rank | f64 × Π extents
//! crc32 u32 over every preceding byte
//! ```
//! All integers and reals are little-endian.

use std::fs;
use std::path::Path;

use super::array::DiffArray;
use super::params::ParamStore;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 7] = b"CBODD01";

/// Named record as stored in a checkpoint.
pub type Record = (String, DiffArray);

pub fn encode<'a>(records: impl IntoIterator<Item = (&'a str, &'a DiffArray)>) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, a) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(a.rank() as u32).to_le_bytes());
        for &e in a.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in a.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated record at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("missing CBODD01 magic".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Format(format!("crc mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
    };
    let mut records = Vec::new();
    while r.pos < body.len() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Format(format!("record name is not utf-8: {e}")))?
            .to_owned();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("payload overflow".into()))?)?;
        let values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let a = DiffArray::new(shape, values).map_err(|e| Error::Format(format!("record {name}: {e}")))?;
        records.push((name, a));
    }
    Ok(records)
}

pub fn save(path: &Path, records: &[Record]) -> Result<()> {
    let bytes = encode(records.iter().map(|(n, a)| (n.as_str(), a)));
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<Record>> {
    decode(&fs::read(path)?)
}

/// Copies matching records into `store`; every parameter must be present with its exact shape.
pub fn restore(store: &mut ParamStore, records: &[Record]) -> Result<()> {
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_owned();
        let (_, src) = records
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Mismatch(format!("checkpoint has no parameter {name}")))?;
        let dst = store.get_mut(id);
        if src.shape() != dst.shape() {
            return Err(Error::Mismatch(format!(
                "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        dst.values_mut().copy_from_slice(src.values());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_layout_of_single_record() {
        let a = DiffArray::new([2], vec![1.0, -0.5]).unwrap();
        let bytes = encode([("w", &a)]);
        let mut expect = b"CBODD01".to_vec();
        expect.extend(1u32.to_le_bytes());
        expect.push(b'w');
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u32.to_le_bytes());
        expect.extend(1.0f64.to_le_bytes());
        expect.extend((-0.5f64).to_le_bytes());
        let crc = crc32fast::hash(&expect);
        expect.extend(crc.to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn corrupted_byte_fails_crc() {
        let a = DiffArray::new([3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut bytes = encode([("p", &a)]);
        bytes[12] ^= 0x40;
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(decode(b"NOTACKPTxxxx").is_err());
    }

    #[test]
    fn rank_zero_record() {
        let s = DiffArray::scalar(4.25);
        let out = decode(&encode([("s", &s)])).unwrap();
        assert_eq!(out[0].1, s);
    }
}
