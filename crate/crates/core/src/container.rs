//! Binary container shared by tile files, gradient tiles and checkpoints.
//!
//! Layout:
//!
//! ```text
//! magic       4 bytes   ("CSTK" for tiles, "CKPT" for checkpoints)
//! header_len  u32 LE    byte length of the header, including its trailing '\n'
//! header      UTF-8 JSON text terminated by a single '\n'
//! payload     concatenated little-endian f32 planes, in header order
//! ```

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Serialize `header` and the f32 planes into container bytes.
pub fn encode<H: Serialize>(magic: &[u8; 4], header: &H, planes: &[&[f32]]) -> Result<Vec<u8>> {
    let mut json = serde_json::to_string(header).map_err(|e| Error::Format(e.to_string()))?;
    json.push('\n');
    let header_len = u32::try_from(json.len())
        .map_err(|_| Error::Format("header longer than u32::MAX bytes".into()))?;
    let payload_len: usize = planes.iter().map(|p| p.len() * 4).sum();

    let mut out = Vec::with_capacity(8 + json.len() + payload_len);
    out.extend_from_slice(magic);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    for plane in planes {
        for v in plane.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Split container bytes into a parsed header and the raw payload.
pub fn decode<'a, H: DeserializeOwned>(magic: &[u8; 4], bytes: &'a [u8]) -> Result<(H, &'a [u8])> {
    if bytes.len() < 8 {
        return Err(Error::Format("file shorter than container preamble".into()));
    }
    if &bytes[..4] != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    let header_len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let header_end = 8usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Format("header length exceeds file size".into()))?;
    let text = std::str::from_utf8(&bytes[8..header_end])
        .map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let text = text
        .strip_suffix('\n')
        .ok_or_else(|| Error::Format("header is not newline-terminated".into()))?;
    let header = serde_json::from_str(text).map_err(|e| Error::Format(format!("header: {e}")))?;
    Ok((header, &bytes[header_end..]))
}

/// Reinterpret a payload as exactly `expected` little-endian f32 values.
pub fn read_f32s(payload: &[u8], expected: usize) -> Result<Vec<f32>> {
    let need = expected * 4;
    if payload.len() != need {
        return Err(Error::Truncated { expected: need, found: payload.len() });
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}
