//! Feature files (`FCPF`) and PGM mask files.
//!
//! Feature file layout, little-endian:
//! `"FCPF" | version: u32 | ndim: u32 | dims: u32 × ndim | values: f32 × Πdims`,
//! row-major, so a feature map is stored channel-major. Values are narrowed
//! to `f32` on write; maps whose values are already `f32`-representable
//! round-trip bit-exactly.

use std::fs;
use std::path::Path;

use super::render::FeatureMap;
use crate::error::{FcpError, Result};
use crate::pseudomask::Mask;

pub const FEATURE_MAGIC: &[u8; 4] = b"FCPF";
pub const FEATURE_VERSION: u32 = 1;

pub fn encode_features(map: &FeatureMap) -> Vec<u8> {
    let dims = [map.channels as u32, map.height as u32, map.width as u32];
    let mut out = Vec::with_capacity(12 + 4 * dims.len() + 4 * map.values.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in &map.values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], at: &mut usize) -> Result<u32> {
    let chunk = bytes
        .get(*at..*at + 4)
        .ok_or_else(|| FcpError::Format("header truncated".into()))?;
    *at += 4;
    Ok(u32::from_le_bytes(chunk.try_into().expect("4 bytes")))
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureMap> {
    if bytes.len() < 4 || &bytes[..4] != FEATURE_MAGIC {
        return Err(FcpError::Format("bad magic, expected FCPF".into()));
    }
    let mut at = 4;
    let version = read_u32(bytes, &mut at)?;
    if version != FEATURE_VERSION {
        return Err(FcpError::Format(format!("unsupported feature file version {version}")));
    }
    let ndim = read_u32(bytes, &mut at)? as usize;
    if ndim != 3 {
        return Err(FcpError::Format(format!("feature map needs 3 dims, file has {ndim}")));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|_| read_u32(bytes, &mut at).map(|d| d as usize))
        .collect::<Result<_>>()?;
    let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let payload = &bytes[at..];
    match count {
        Some(n) if n.checked_mul(4) == Some(payload.len()) => {}
        _ => {
            return Err(FcpError::Format(format!(
                "payload is {} bytes, header {dims:?} implies {}",
                payload.len(),
                count.map_or("overflow".to_string(), |n| (4 * n).to_string())
            )))
        }
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    FeatureMap::new(dims[0], dims[1], dims[2], values).map_err(|e| FcpError::Format(e.to_string()))
}

pub fn write_features(path: impl AsRef<Path>, map: &FeatureMap) -> Result<()> {
    fs::write(path, encode_features(map))?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMap> {
    decode_features(&fs::read(path)?)
}

/// Binary PGM (P5), maxval 255. Soft values are scaled by 255 and rounded.
pub fn encode_pgm(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(
        mask.values()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    out
}

fn pgm_token(bytes: &[u8], at: &mut usize) -> Result<String> {
    loop {
        while *at < bytes.len() && bytes[*at].is_ascii_whitespace() {
            *at += 1;
        }
        if *at < bytes.len() && bytes[*at] == b'#' {
            while *at < bytes.len() && bytes[*at] != b'\n' {
                *at += 1;
            }
            continue;
        }
        break;
    }
    let start = *at;
    while *at < bytes.len() && !bytes[*at].is_ascii_whitespace() {
        *at += 1;
    }
    if start == *at {
        return Err(FcpError::Format("PGM header truncated".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*at]).into_owned())
}

/// Parse a P5 PGM into a binary mask: foreground where value ≥ 128 (of 255).
pub fn decode_pgm(bytes: &[u8]) -> Result<Mask> {
    let mut at = 0;
    if pgm_token(bytes, &mut at)? != "P5" {
        return Err(FcpError::Format("not a binary PGM (P5)".into()));
    }
    let mut num = |what: &str| -> Result<usize> {
        pgm_token(bytes, &mut at)?
            .parse::<usize>()
            .map_err(|_| FcpError::Format(format!("bad PGM {what}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(FcpError::Format(format!("PGM maxval must be 255, got {maxval}")));
    }
    at += 1;
    let data = bytes.get(at..).unwrap_or_default();
    if data.len() != width * height {
        return Err(FcpError::Format(format!(
            "PGM payload is {} bytes, expected {}",
            data.len(),
            width * height
        )));
    }
    let fg: Vec<bool> = data.iter().map(|&b| b >= 128).collect();
    Mask::from_bools(height, width, &fg).map_err(|e| FcpError::Format(e.to_string()))
}

pub fn write_pgm(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    fs::write(path, encode_pgm(mask))?;
    Ok(())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Mask> {
    decode_pgm(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_map() -> FeatureMap {
        let values = (0..2 * 3 * 4).map(|i| (i as f32 * 0.37).sin() as f64).collect();
        FeatureMap::new(2, 3, 4, values).unwrap()
    }

    #[test]
    fn header_layout() {
        let b = encode_features(&small_map());
        assert_eq!(&b[..4], b"FCPF");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 2);
        assert_eq!(b.len(), 24 + 4 * 24);
    }

    #[test]
    fn corrupted_files_are_format_errors() {
        let mut b = encode_features(&small_map());
        let truncated = &b[..b.len() - 3];
        assert!(matches!(decode_features(truncated), Err(FcpError::Format(_))));
        let mut trailing = b.clone();
        trailing.push(0);
        assert!(matches!(decode_features(&trailing), Err(FcpError::Format(_))));
        b[0] = b'X';
        assert!(matches!(decode_features(&b), Err(FcpError::Format(_))));
        assert!(matches!(decode_features(&b[..2]), Err(FcpError::Format(_))));
    }

    #[test]
    fn pgm_threshold_and_header_comments() {
        let mut bytes = b"P5\n# a comment\n3 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 127, 128, 255, 200, 1]);
        let m = decode_pgm(&bytes).unwrap();
        assert_eq!((m.height(), m.width()), (2, 3));
        assert_eq!(m.values(), &[0.0, 0.0, 1.0, 1.0, 1.0, 0.0]);
        assert!(m.is_binary());
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
    }
}
