//! Versioned container for the two entropy-coded streams.
//!
//! ```text
//! offset size  field
//! 0      4     magic "ICMB"
//! 4      2     version (u16 LE)
//! 6      4     image width (u32 LE)
//! 10     4     image height
//! 14     12    latent shape C, h, w (3 x u32 LE)
//! 26     12    hyper-latent shape C, h, w
//! 38     32    model identity (SHA-256 of the parameters)
//! 70     4     hyper payload length
//! 74     n     hyper payload
//! ..     4     latent payload length
//! ..     m     latent payload
//! ```
//!
//! The hyper stream comes first because the decoder needs `ẑ` to build the
//! latent tables.

use crate::error::{Error, Result};
use crate::params::Fingerprint;

pub const MAGIC: [u8; 4] = *b"ICMB";
pub const VERSION: u16 = 1;
/// Container bytes besides the two payloads.
pub const HEADER_BYTES: usize = 4 + 2 + 8 + 12 + 12 + 32 + 4 + 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub width: u32,
    pub height: u32,
    pub latent_shape: [u32; 3],
    pub hyper_shape: [u32; 3],
    pub model_id: Fingerprint,
    pub hyper_payload: Vec<u8>,
    pub latent_payload: Vec<u8>,
}

impl Bitstream {
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        for d in self.latent_shape.iter().chain(&self.hyper_shape) {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.extend_from_slice(&self.model_id);
        for p in [&self.hyper_payload, &self.latent_payload] {
            out.extend_from_slice(&(p.len() as u32).to_le_bytes());
            out.extend_from_slice(p);
        }
        out
    }

    pub fn serialized_len(&self) -> usize {
        HEADER_BYTES + self.hyper_payload.len() + self.latent_payload.len()
    }

    pub fn payload_bits(&self) -> usize {
        8 * (self.hyper_payload.len() + self.latent_payload.len())
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic { expected: MAGIC, found: magic });
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let width = r.u32()?;
        let height = r.u32()?;
        let latent_shape = [r.u32()?, r.u32()?, r.u32()?];
        let hyper_shape = [r.u32()?, r.u32()?, r.u32()?];
        let model_id: Fingerprint = r.take(32)?.try_into().unwrap();
        let n = r.u32()? as usize;
        let hyper_payload = r.take(n)?.to_vec();
        let m = r.u32()? as usize;
        let latent_payload = r.take(m)?.to_vec();
        if r.pos != bytes.len() {
            return Err(Error::CorruptStream(format!("{} trailing bytes after container", bytes.len() - r.pos)));
        }
        Ok(Bitstream { width, height, latent_shape, hyper_shape, model_id, hyper_payload, latent_payload })
    }

    /// Bits per pixel of the whole serialized container.
    pub fn bpp(&self) -> Result<f64> {
        bpp(self.serialized_len(), self.width as usize, self.height as usize)
    }
}

/// `8 * bytes / (width * height)`.
pub fn bpp(bytes: usize, width: usize, height: usize) -> Result<f64> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("bpp needs positive image dimensions".into()));
    }
    Ok((bytes * 8) as f64 / (width * height) as f64)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(Error::Overrun { needed: n, available });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
