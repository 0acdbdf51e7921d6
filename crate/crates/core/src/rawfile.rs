//! Little-endian float array files for images and deformation fields.
//!
//! Layout: `b"RGRF"`, then `version, kind, channels, height, width` as `u32`, then
//! `channels·height·width` `f32` values in planar row-major order.

use std::fs;
use std::path::Path;

use crate::domain::{DeformationField, Image};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RGRF";
pub const VERSION: u32 = 1;
pub const EXTENSION: &str = "rgrf";
const HEADER_LEN: usize = 4 + 5 * 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArrayKind {
    Image = 0,
    Field = 1,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawArray {
    pub kind: ArrayKind,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

pub fn encode(kind: ArrayKind, channels: usize, height: usize, width: usize, data: &[f64]) -> Vec<u8> {
    assert_eq!(data.len(), channels * height * width, "raw array size");
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * data.len());
    out.extend_from_slice(MAGIC);
    for v in [VERSION, kind as u32, channels as u32, height as u32, width as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<RawArray> {
    let corrupt = |reason: String| Error::Corrupt { path: path.to_path_buf(), reason };
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(corrupt("missing RGRF header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let version = word(0);
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let kind = match word(1) {
        0 => ArrayKind::Image,
        1 => ArrayKind::Field,
        k => return Err(corrupt(format!("unknown array kind {k}"))),
    };
    let (channels, height, width) = (word(2) as usize, word(3) as usize, word(4) as usize);
    let n = channels
        .checked_mul(height)
        .and_then(|v| v.checked_mul(width))
        .ok_or_else(|| corrupt("dimension overflow".into()))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != 4 * n {
        return Err(corrupt(format!("expected {} data bytes, found {}", 4 * n, body.len())));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    Ok(RawArray { kind, channels, height, width, data })
}

pub fn read(path: &Path) -> Result<RawArray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    let bytes = encode(ArrayKind::Image, 1, image.height(), image.width(), image.data());
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_field(path: &Path, field: &DeformationField) -> Result<()> {
    let bytes = encode(ArrayKind::Field, 2, field.height(), field.width(), field.data());
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_field(path: &Path) -> Result<DeformationField> {
    let raw = read(path)?;
    if raw.kind != ArrayKind::Field || raw.channels != 2 {
        return Err(Error::Corrupt { path: path.to_path_buf(), reason: "not a deformation field".into() });
    }
    DeformationField::from_planes(raw.height, raw.width, raw.data)
}
