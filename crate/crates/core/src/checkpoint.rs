//! VXCK checkpoint container.
//!
//! Little-endian layout:
//!
//! | size        | field                                          |
//! |-------------|------------------------------------------------|
//! | 4           | magic `VXCK`                                   |
//! | 2           | version (u16) = 1                              |
//! | 2           | reserved (u16) = 0                             |
//! | 4 + n       | config text length (u32), UTF-8 `key = value`  |
//! | 4           | stage (u32)                                    |
//! | 8           | epoch (u64)                                    |
//! | 8           | completed steps (u64)                          |
//! | 4           | tensor count (u32)                             |
//! | per tensor  | name length (u16), name, rank (u8), extents (u32 each), values (f64 each) |
//! | 4           | CRC-32 of every preceding byte                 |
//!
//! Values are stored as 64-bit floats so that a training run resumed from a
//! checkpoint is bit-identical to an uninterrupted one.

use std::fs;
use std::path::Path;

use voxgrad::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VXCK";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub stage: u32,
    pub epoch: u64,
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Exact encoded size, from the layout table.
    pub fn encoded_len(&self) -> usize {
        let records: usize = self
            .tensors
            .iter()
            .map(|(name, t)| 2 + name.len() + 1 + 4 * t.rank() + 8 * t.numel())
            .sum();
        4 + 2 + 2 + 4 + self.config_text.len() + 4 + 8 + 8 + 4 + records + 4
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&self.stage.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let name_len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
            let rank = u8::try_from(t.rank()).map_err(|_| Error::Checkpoint(format!("rank too large: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(rank);
            for &e in t.shape() {
                let e = u32::try_from(e).map_err(|_| Error::Checkpoint(format!("extent too large: {name}")))?;
                out.extend_from_slice(&e.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::format(bytes.len(), "truncated checkpoint"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let mut r = Reader { bytes: body, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format(0, "bad magic, expected VXCK"));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
        }
        r.u16()?;
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let config_len = r.u32()? as usize;
        let config_text = String::from_utf8(r.take(config_len)?.to_vec())
            .map_err(|_| Error::format(12, "config text is not UTF-8"))?;
        let stage = r.u32()?;
        let epoch = r.u64()?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_at = r.at;
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::format(name_at, "tensor name is not UTF-8"))?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::format(r.at, "tensor too large"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.at != body.len() {
            return Err(Error::format(r.at, "trailing bytes after tensor records"));
        }
        Ok(Checkpoint { config_text, stage, epoch, step, tensors })
    }

    /// Writes through a temporary file so an interrupted write never
    /// replaces a good checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("vxck.tmp");
        fs::write(&tmp, self.encode()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.at..end];
                self.at = end;
                Ok(s)
            }
            None => Err(Error::format(self.at, format!("truncated: need {n} more bytes"))),
        }
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config_text: "seed = 3\n".into(),
            stage: 2,
            epoch: 5,
            step: 17,
            tensors: vec![
                ("g.stage1.weight".into(), Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1 - 0.25)),
                ("scalar".into(), Tensor::scalar(f64::MIN_POSITIVE)),
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.encode().unwrap();
        assert_eq!(bytes.len(), ck.encoded_len());
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.config_text, ck.config_text);
        assert_eq!((back.stage, back.epoch, back.step), (2, 5, 17));
        for ((na, a), (nb, b)) in back.tensors.iter().zip(&ck.tensors) {
            assert_eq!(na, nb);
            assert!(a.bit_eq(b));
        }
    }

    #[test]
    fn size_follows_layout() {
        // 4+2+2 + 4+9 + 4+8+8 + 4 + (2+15+1+8+48) + (2+6+1+0+8) + 4
        assert_eq!(sample().encode().unwrap().len(), 140);
    }

    #[test]
    fn any_flipped_byte_is_detected() {
        let bytes = sample().encode().unwrap();
        for i in 0..bytes.len() {
            let mut bad = bytes.clone();
            bad[i] ^= 0x10;
            assert!(Checkpoint::decode(&bad).is_err(), "flip at {i} went unnoticed");
        }
    }

    #[test]
    fn truncation_and_version_are_reported() {
        let bytes = sample().encode().unwrap();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 9]).is_err());
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(Checkpoint::decode(&v2), Err(Error::Format { offset: 4, .. })));
    }
}
