//! FSSF: the binary feature/mask file format.
//!
//! Layout, all integers little-endian:
//!
//! | offset | size | field                                |
//! |--------|------|--------------------------------------|
//! | 0      | 4    | magic `"FSSF"`                       |
//! | 4      | 2    | format version (`1`)                 |
//! | 6      | 2    | kind: `0` feature map, `1` mask      |
//! | 8      | 4    | height (u32)                         |
//! | 12     | 4    | width (u32)                          |
//! | 16     | 4    | channels (u32, `1` for masks)        |
//! | 20     | ...  | payload: f32 LE, row-major, channel-minor |
//!
//! The payload must be exactly `4 * height * width * channels` bytes. Masks
//! are validated to [0, 1] on read.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{FeatureMap, SoftMask};

pub const MAGIC: [u8; 4] = *b"FSSF";
pub const VERSION: u16 = 1;
pub const KIND_FEATURES: u16 = 0;
pub const KIND_MASK: u16 = 1;

const HEADER_LEN: usize = 20;

/// Either payload kind of an FSSF file.
#[derive(Debug, Clone, PartialEq)]
pub enum FssfValue {
    Features(FeatureMap),
    Mask(SoftMask),
}

impl From<FeatureMap> for FssfValue {
    fn from(value: FeatureMap) -> Self {
        FssfValue::Features(value)
    }
}

impl From<SoftMask> for FssfValue {
    fn from(value: SoftMask) -> Self {
        FssfValue::Mask(value)
    }
}

/// Serialize a value to FSSF bytes.
pub fn encode(value: &FssfValue) -> Vec<u8> {
    let (kind, height, width, channels, data) = match value {
        FssfValue::Features(map) => (
            KIND_FEATURES,
            map.height(),
            map.width(),
            map.channels(),
            map.data(),
        ),
        FssfValue::Mask(mask) => (KIND_MASK, mask.height(), mask.width(), 1, mask.data()),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + data.len() * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&kind.to_le_bytes());
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&(channels as u32).to_le_bytes());
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parse FSSF bytes back into a value.
pub fn decode(bytes: &[u8]) -> Result<FssfValue> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedPayload {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("slice length checked");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().expect("length"));
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let kind = u16::from_le_bytes(bytes[6..8].try_into().expect("length"));
    let height = u32::from_le_bytes(bytes[8..12].try_into().expect("length")) as usize;
    let width = u32::from_le_bytes(bytes[12..16].try_into().expect("length")) as usize;
    let channels = u32::from_le_bytes(bytes[16..20].try_into().expect("length")) as usize;

    let value_count = height
        .checked_mul(width)
        .and_then(|hw| hw.checked_mul(channels))
        .ok_or_else(|| Error::InvalidDimensions("header dimensions overflow".to_string()))?;
    let expected = value_count
        .checked_mul(4)
        .ok_or_else(|| Error::InvalidDimensions("payload size overflows".to_string()))?;
    let actual = bytes.len() - HEADER_LEN;
    if actual < expected {
        return Err(Error::TruncatedPayload { expected, actual });
    }
    if actual > expected {
        return Err(Error::TrailingData { expected, actual });
    }

    let mut data = Vec::with_capacity(value_count);
    for chunk in bytes[HEADER_LEN..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().expect("chunk of 4")));
    }

    match kind {
        KIND_FEATURES => Ok(FssfValue::Features(FeatureMap::new(
            height, width, channels, data,
        )?)),
        KIND_MASK => {
            if channels != 1 {
                return Err(Error::InvalidDimensions(format!(
                    "mask files must declare 1 channel, got {channels}"
                )));
            }
            Ok(FssfValue::Mask(SoftMask::new(height, width, data)?))
        }
        other => Err(Error::UnknownKind(other)),
    }
}

/// Write a value to an FSSF file.
pub fn write_feature_file(path: impl AsRef<Path>, value: &FssfValue) -> Result<()> {
    fs::write(path, encode(value))?;
    Ok(())
}

/// Read an FSSF file.
pub fn read_feature_file(path: impl AsRef<Path>) -> Result<FssfValue> {
    decode(&fs::read(path)?)
}

/// Read an FSSF file that must hold a feature map.
pub fn read_feature_map(path: impl AsRef<Path>) -> Result<FeatureMap> {
    match read_feature_file(&path)? {
        FssfValue::Features(map) => Ok(map),
        FssfValue::Mask(_) => Err(Error::InvalidValue(format!(
            "{} holds a mask, expected a feature map",
            path.as_ref().display()
        ))),
    }
}

/// Read an FSSF file that must hold a mask.
pub fn read_mask(path: impl AsRef<Path>) -> Result<SoftMask> {
    match read_feature_file(&path)? {
        FssfValue::Mask(mask) => Ok(mask),
        FssfValue::Features(_) => Err(Error::InvalidValue(format!(
            "{} holds a feature map, expected a mask",
            path.as_ref().display()
        ))),
    }
}
