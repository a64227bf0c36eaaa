//! Shared framing: magic, version u32, header length u64, JSON header, zero
//! padding to a 64-byte boundary, payload, CRC32 of the payload. All
//! integers little-endian.

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const ALIGN: usize = 64;

fn pad_to(buf: &mut Vec<u8>, base: usize) {
    while (buf.len() - base) % ALIGN != 0 {
        buf.push(0);
    }
}

/// Accumulates 64-byte aligned sections.
#[derive(Default)]
pub struct PayloadWriter {
    buf: Vec<u8>,
}

impl PayloadWriter {
    /// Appends `bytes` at the next aligned offset and returns that offset.
    pub fn section(&mut self, bytes: &[u8]) -> u64 {
        pad_to(&mut self.buf, 0);
        let at = self.buf.len() as u64;
        self.buf.extend_from_slice(bytes);
        at
    }

    pub fn f32s(&mut self, values: &[f32]) -> u64 {
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        self.section(&bytes)
    }

    pub fn finish(mut self) -> Vec<u8> {
        pad_to(&mut self.buf, 0);
        self.buf
    }
}

pub fn write<H: Serialize>(magic: &[u8; 8], version: u32, header: &H, payload: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header).map_err(|e| Error::Internal(e.to_string()))?;
    let mut out = Vec::with_capacity(json.len() + payload.len() + 96);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    pad_to(&mut out, 0);
    out.extend_from_slice(payload);
    out.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    Ok(out)
}

pub fn check_magic(bytes: &[u8], magic: &[u8; 8]) -> Result<()> {
    let found = &bytes[..bytes.len().min(8)];
    if found != magic {
        return Err(Error::MagicMismatch {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(found).into_owned(),
        });
    }
    Ok(())
}

pub fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
}

pub fn check_version(bytes: &[u8], supported: u32) -> Result<()> {
    let found = read_u32(bytes, 8).ok_or_else(|| Error::Truncated("version field".into()))?;
    if found != supported {
        return Err(Error::UnsupportedVersion { found, supported });
    }
    Ok(())
}

/// Parses the header and returns it with the payload start offset.
pub fn read_header<H: DeserializeOwned>(bytes: &[u8], magic: &[u8; 8], version: u32) -> Result<(H, usize)> {
    check_magic(bytes, magic)?;
    check_version(bytes, version)?;
    let len = bytes
        .get(12..20)
        .map(|b| u64::from_le_bytes(b.try_into().unwrap()) as usize)
        .ok_or_else(|| Error::Truncated("header length".into()))?;
    let json = bytes.get(20..20usize.saturating_add(len)).ok_or_else(|| Error::Truncated("header".into()))?;
    let header = serde_json::from_slice(json).map_err(|e| Error::Header(e.to_string()))?;
    Ok((header, (20 + len).div_ceil(ALIGN) * ALIGN))
}

/// The payload, after checking its length and checksum.
pub fn checked_payload(bytes: &[u8], start: usize, payload_len: usize) -> Result<&[u8]> {
    let end = start.checked_add(payload_len).ok_or_else(|| Error::Header("payload length".into()))?;
    let payload = bytes.get(start..end).ok_or_else(|| Error::Truncated("payload".into()))?;
    let expected = read_u32(bytes, end).ok_or_else(|| Error::Truncated("checksum".into()))?;
    let actual = crc32fast::hash(payload);
    if expected != actual {
        return Err(Error::ChecksumMismatch { expected, actual });
    }
    Ok(payload)
}

pub fn slice<'a>(payload: &'a [u8], offset: u64, len: usize, what: &str) -> Result<&'a [u8]> {
    let start = offset as usize;
    start
        .checked_add(len)
        .and_then(|end| payload.get(start..end))
        .ok_or_else(|| Error::Header(format!("section of {what} lies outside the payload")))
}

pub fn f32s(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
}

pub fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
