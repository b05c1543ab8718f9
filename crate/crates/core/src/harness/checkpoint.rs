//! Single-file checkpoints.
//!
//! Layout, all integers `u64` little-endian and values `f64` little-endian:
//! `"FCPC" | version: u32 | config_len | config text (UTF-8, key = value lines)
//!  | param_count | per parameter: name_len | name | ndim | dims… | values…`
//! Parameters appear in declaration order.

use std::fs;
use std::path::Path;

use super::config::RunConfig;
use super::model::Model;
use crate::autodiff::Parameter;
use crate::error::{FcpError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FCPC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let text = model.cfg.to_text();
    put_u64(&mut out, text.len() as u64);
    out.extend_from_slice(text.as_bytes());
    put_u64(&mut out, model.params.len() as u64);
    for p in &model.params {
        put_u64(&mut out, p.name.len() as u64);
        out.extend_from_slice(p.name.as_bytes());
        put_u64(&mut out, p.shape.len() as u64);
        for &d in &p.shape {
            put_u64(&mut out, d as u64);
        }
        for &v in &p.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| FcpError::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| FcpError::Format(format!("implausible length {v}")))
    }

    fn text(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| FcpError::Format("non-UTF-8 text".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(FcpError::Format("bad magic, expected FCPC".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(FcpError::Format(format!("unsupported checkpoint version {version}")));
    }
    let cfg = RunConfig::parse(&r.text()?)?;
    let count = r.len()?;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.text()?;
        let ndim = r.len()?;
        let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| FcpError::Format("parameter size overflows".into()))?;
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| FcpError::Format("parameter size overflows".into()))?,
        )?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push(Parameter::new(name, &shape, values)?);
    }
    if r.at != bytes.len() {
        return Err(FcpError::Format(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Model::from_parameters(cfg, params)
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model) -> Result<()> {
    fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    decode_checkpoint(&fs::read(path)?)
}
