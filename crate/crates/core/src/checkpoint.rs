//! Checkpoint files.
//!
//! ```text
//! "ICMC" | version u16 | fingerprint [32] | epoch u32
//! tensor count u32, then per tensor:
//!     name length u16 | name (UTF-8) | shape 4 x u32 | f32 LE data
//! optimizer flag u8 (0 = absent); when 1:
//!     kind u8 | step u64 | slot count u32 | slots as tensors above
//! ```
//! All integers are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::autodiff::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::params::{hex, Fingerprint, ModelParams};

pub const MAGIC: [u8; 4] = *b"ICMC";
pub const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub optimizer: Option<OptimizerState>,
    pub epoch: u32,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    for d in t.shape().dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn to_bytes(params: &ModelParams, optimizer: Option<&OptimizerState>, epoch: u32) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(params.fingerprint());
    out.extend_from_slice(&epoch.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        put_tensor(&mut out, name, t);
    }
    match optimizer {
        None => out.push(0),
        Some(s) => {
            out.push(1);
            out.push(s.kind.code());
            out.extend_from_slice(&s.step.to_le_bytes());
            out.extend_from_slice(&(s.slots.len() as u32).to_le_bytes());
            for (name, t) in &s.slots {
                put_tensor(&mut out, name, t);
            }
        }
    }
    out
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.b.len() - self.pos < n {
            return Err(Error::CorruptFile(format!(
                "truncated checkpoint: need {n} bytes at offset {}, {} left",
                self.pos,
                self.b.len() - self.pos
            )));
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
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
    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::CorruptFile("tensor name is not UTF-8".into()))?
            .to_string();
        let d = [self.u32()?, self.u32()?, self.u32()?, self.u32()?].map(|v| v as usize);
        let shape = Shape::new(d[0], d[1], d[2], d[3]);
        let n = d.iter().try_fold(1usize, |a, &v| a.checked_mul(v));
        let bytes = n
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::CorruptFile(format!("tensor {name} has absurd shape {shape}")))?;
        let data = self
            .take(bytes)?
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

/// Parses a checkpoint, refusing it when `expected` is given and differs.
pub fn from_bytes(bytes: &[u8], expected: Option<&Fingerprint>) -> Result<Checkpoint> {
    let mut r = Reader { b: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic { expected: MAGIC, found: magic });
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let fp: Fingerprint = r.take(32)?.try_into().unwrap();
    if let Some(e) = expected {
        if e != &fp {
            return Err(Error::FingerprintMismatch(format!(
                "checkpoint architecture {} does not match expected {}",
                hex(&fp[..8]),
                hex(&e[..8])
            )));
        }
    }
    let epoch = r.u32()?;
    let mut params = ModelParams::new(fp);
    for _ in 0..r.u32()? {
        let (name, t) = r.tensor()?;
        params.insert(name, t).map_err(|e| Error::CorruptFile(e.to_string()))?;
    }
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let kind = OptimizerKind::from_code(r.u8()?)?;
            let step = r.u64()?;
            let mut slots = BTreeMap::new();
            for _ in 0..r.u32()? {
                let (name, t) = r.tensor()?;
                slots.insert(name, t);
            }
            Some(OptimizerState { kind, step, slots })
        }
        f => return Err(Error::CorruptFile(format!("bad optimizer flag {f}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::CorruptFile(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { params, optimizer, epoch })
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, optimizer: Option<&OptimizerState>, epoch: u32) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, to_bytes(params, optimizer, epoch))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, expected: Option<&Fingerprint>) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{build_codec, CodecConfig};

    #[test]
    fn round_trip_is_bit_exact() {
        let p = build_codec(&CodecConfig::small(), 1).unwrap();
        let mut st = OptimizerState::new(OptimizerKind::Adam);
        st.step = 12;
        st.slots.insert("m/a".into(), Tensor::full(Shape::new(1, 1, 1, 3), 0.25));
        let bytes = to_bytes(&p, Some(&st), 7);
        let c = from_bytes(&bytes, Some(p.fingerprint())).unwrap();
        assert_eq!(c.params, p);
        assert_eq!(c.optimizer.unwrap(), st);
        assert_eq!(c.epoch, 7);
        assert_eq!(to_bytes(&c.params, None, 7), to_bytes(&p, None, 7));
    }

    #[test]
    fn truncation_and_mismatch() {
        let p = build_codec(&CodecConfig::small(), 1).unwrap();
        let bytes = to_bytes(&p, None, 0);
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3], None), Err(Error::CorruptFile(_))));
        let other = CodecConfig { latent_channels: 4, ..CodecConfig::small() }.fingerprint();
        assert!(matches!(from_bytes(&bytes, Some(&other)), Err(Error::FingerprintMismatch(_))));
    }
}
