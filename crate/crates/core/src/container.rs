//! Versioned binary container shared by dataset and checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes
//! version    u32
//! header_len u32
//! body_len   u64
//! header     header_len bytes of UTF-8 JSON
//! body       body_len bytes
//! crc32      u32 over every preceding byte
//! ```

use crate::error::FormatError;
use crate::{Error, Result};

const PREFIX_LEN: usize = 8 + 4 + 4 + 8;

pub(crate) struct Spec {
    pub kind: &'static str,
    pub magic: [u8; 8],
    pub version: u32,
}

impl Spec {
    fn err(&self, source: FormatError) -> Error {
        Error::Format {
            kind: self.kind,
            source,
        }
    }

    pub fn encode(&self, header: &[u8], body: &[u8]) -> Vec<u8> {
        let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + body.len() + 4);
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(header);
        out.extend_from_slice(body);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Validates framing and checksum; returns `(header, body)`.
    pub fn decode<'a>(&self, bytes: &'a [u8]) -> Result<(&'a [u8], &'a [u8])> {
        if bytes.len() < 8 || bytes[..8] != self.magic {
            return Err(self.err(FormatError::BadMagic));
        }
        if bytes.len() < PREFIX_LEN {
            return Err(self.err(FormatError::Truncated {
                needed: PREFIX_LEN as u64,
                available: bytes.len() as u64,
            }));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != self.version {
            return Err(self.err(FormatError::Version {
                found: version,
                expected: self.version,
            }));
        }
        let header_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as u64;
        let body_len = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let needed = (PREFIX_LEN as u64)
            .saturating_add(header_len)
            .saturating_add(body_len)
            .saturating_add(4);
        if (bytes.len() as u64) < needed {
            return Err(self.err(FormatError::Truncated {
                needed,
                available: bytes.len() as u64,
            }));
        }
        if (bytes.len() as u64) > needed {
            return Err(self.err(FormatError::Body(format!(
                "{} trailing bytes after checksum",
                bytes.len() as u64 - needed
            ))));
        }
        let end = needed as usize - 4;
        let stored = u32::from_le_bytes(bytes[end..end + 4].try_into().unwrap());
        let computed = crc32fast::hash(&bytes[..end]);
        if stored != computed {
            return Err(self.err(FormatError::Checksum { stored, computed }));
        }
        let h_end = PREFIX_LEN + header_len as usize;
        Ok((&bytes[PREFIX_LEN..h_end], &bytes[h_end..end]))
    }

    pub fn header_error(&self, msg: impl ToString) -> Error {
        self.err(FormatError::Header(msg.to_string()))
    }

    pub fn body_error(&self, msg: impl ToString) -> Error {
        self.err(FormatError::Body(msg.to_string()))
    }
}

/// Little-endian record writer.
#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        for &x in v {
            self.f64(x);
        }
    }
}

/// Little-endian record reader over a body slice.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.bytes.len() - self.pos < n {
            return Err(format!("record ends early at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let raw = self.take(n.checked_mul(8).ok_or("length overflow")?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn finished(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
