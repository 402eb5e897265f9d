//! Shared binary container for dataset and checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes
//! version      u32
//! header_len   u32
//! header       header_len bytes of UTF-8 JSON
//! payload_len  u64
//! payload      payload_len bytes
//! checksum     32 bytes, SHA-256 of every preceding byte
//! ```
//!
//! Readers check, in order: magic, version, length fields, checksum.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{FormatError, Result};

pub const CHECKSUM_LEN: usize = 32;

pub fn encode<H: Serialize>(magic: &[u8; 8], version: u32, header: &H, payload: &[u8]) -> Vec<u8> {
    let header = serde_json::to_vec(header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + 4 + 4 + header.len() + 8 + payload.len() + CHECKSUM_LEN);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode<H: DeserializeOwned>(
    bytes: &[u8],
    magic: &[u8; 8],
    supported: u32,
) -> Result<(H, Vec<u8>), FormatError> {
    let expected = String::from_utf8_lossy(magic).into_owned();
    if bytes.len() < 8 || &bytes[..8] != magic {
        let n = bytes.len().min(8);
        return Err(FormatError::BadMagic {
            expected,
            found: String::from_utf8_lossy(&bytes[..n]).into_owned(),
        });
    }
    let mut r = ByteReader::new(&bytes[8..]);
    let version = r.u32("version")?;
    if version != supported {
        return Err(FormatError::Version {
            found: version,
            supported,
        });
    }
    let header_len = r.u32("header length")? as usize;
    let header_bytes = r.take(header_len, "header")?;
    let payload_len = r.u64("payload length")? as usize;
    let payload = r.take(payload_len, "payload")?;
    let stored = r.take(CHECKSUM_LEN, "checksum")?;
    if r.remaining() != 0 {
        return Err(FormatError::Header(format!(
            "{} trailing bytes after checksum",
            r.remaining()
        )));
    }
    let body_len = bytes.len() - CHECKSUM_LEN;
    let computed = Sha256::digest(&bytes[..body_len]);
    if computed.as_slice() != stored {
        return Err(FormatError::Checksum {
            stored: hex::encode(stored),
            computed: hex::encode(computed),
        });
    }
    let header =
        serde_json::from_slice(header_bytes).map_err(|e| FormatError::Header(e.to_string()))?;
    Ok((header, payload.to_vec()))
}

/// Writes through a sibling temporary file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// SHA-256 of a byte string as lowercase hex.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    /// Packs 0/1 values eight per byte, least significant bit first.
    pub fn bits(&mut self, bits: impl IntoIterator<Item = bool>) {
        let mut byte = 0u8;
        let mut n = 0;
        for b in bits {
            if b {
                byte |= 1 << n;
            }
            n += 1;
            if n == 8 {
                self.buf.push(byte);
                byte = 0;
                n = 0;
            }
        }
        if n > 0 {
            self.buf.push(byte);
        }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(FormatError::Truncated(format!(
                "{what} needs {n} bytes, {} left",
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>, FormatError> {
        let raw = self.take(n.saturating_mul(8), what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn bits(&mut self, n: usize, what: &str) -> Result<Vec<bool>, FormatError> {
        let raw = self.take(n.div_ceil(8), what)?;
        Ok((0..n).map(|i| raw[i / 8] >> (i % 8) & 1 == 1).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAGIC: &[u8; 8] = b"TESTFILE";

    #[test]
    fn round_trip() {
        let bytes = encode(MAGIC, 3, &vec![1, 2], b"payload");
        let (h, p): (Vec<i32>, _) = decode(&bytes, MAGIC, 3).unwrap();
        assert_eq!(h, vec![1, 2]);
        assert_eq!(p, b"payload");
    }

    #[test]
    fn diagnoses_each_failure() {
        let bytes = encode(MAGIC, 3, &0, b"payload");
        assert!(matches!(
            decode::<i32>(&bytes, b"OTHERMAG", 3),
            Err(FormatError::BadMagic { .. })
        ));
        assert_eq!(
            decode::<i32>(&bytes, MAGIC, 2).unwrap_err(),
            FormatError::Version {
                found: 3,
                supported: 2
            }
        );
        assert!(matches!(
            decode::<i32>(&bytes[..bytes.len() - 5], MAGIC, 3),
            Err(FormatError::Truncated(_))
        ));
        let mut bad = bytes.clone();
        let k = bad.len() - CHECKSUM_LEN - 2;
        bad[k] ^= 0xFF;
        assert!(matches!(
            decode::<i32>(&bad, MAGIC, 3),
            Err(FormatError::Checksum { .. })
        ));
    }

    #[test]
    fn bit_packing_round_trips() {
        let bits: Vec<bool> = (0..13).map(|i| i % 3 == 0).collect();
        let mut w = ByteWriter::new();
        w.bits(bits.iter().copied());
        let buf = w.finish();
        assert_eq!(buf.len(), 2);
        assert_eq!(ByteReader::new(&buf).bits(13, "bits").unwrap(), bits);
    }
}
