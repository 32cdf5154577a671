//! 16-bit binary PGM dumps of depth maps, in millimeters.

use crate::error::{Error, Result};

use super::render::DepthMap;

/// Encodes as `P5` with maxval 65535; values are rounded to whole
/// millimeters and saturate at 65.535 m.
pub fn encode_pgm16(depth: &DepthMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n65535\n", depth.width, depth.height).into_bytes();
    for d in &depth.data {
        let mm = (d * 1000.0).round().clamp(0.0, 65535.0) as u16;
        out.extend_from_slice(&mm.to_be_bytes());
    }
    out
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<u64> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format(start as u64, "expected a header integer"));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format(start as u64, "header integer out of range"))
}

/// Decodes a 16-bit `P5` PGM of millimeter depths into meters.
pub fn decode_pgm16(bytes: &[u8]) -> Result<DepthMap> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::format(0, "not a binary PGM (P5)"));
    }
    let mut pos = 2;
    let width = next_token(bytes, &mut pos)?;
    let height = next_token(bytes, &mut pos)?;
    let maxval = next_token(bytes, &mut pos)?;
    if maxval != 65535 {
        return Err(Error::format(pos as u64, format!("maxval {maxval} is not 65535")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format(pos as u64, "missing separator before raster"));
    }
    pos += 1;
    let pixels = width
        .checked_mul(height)
        .filter(|p| *p <= (bytes.len() / 2) as u64)
        .ok_or_else(|| Error::format(pos as u64, "raster larger than file"))? as usize;
    if bytes.len() - pos != pixels * 2 {
        return Err(Error::format(pos as u64, format!("raster needs {} bytes, found {}", pixels * 2, bytes.len() - pos)));
    }
    let data = bytes[pos..]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 1000.0)
        .collect();
    DepthMap::new(width as usize, height as usize, data)
}
