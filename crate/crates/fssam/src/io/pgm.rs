//! Binary PGM (P5) dumps of masks.
//!
//! Mask values are quantized linearly to 0..=255. Good enough for eyeballing
//! prior maps without pulling in an image library.

use std::fs;
use std::path::Path;

use crate::error::Result;
use crate::numerics::SoftMask;

/// Serialize a mask as a binary PGM image with maxval 255.
pub fn encode_pgm(mask: &SoftMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(
        mask.data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    out
}

/// Write a mask to a PGM file.
pub fn write_pgm(path: impl AsRef<Path>, mask: &SoftMask) -> Result<()> {
    fs::write(path, encode_pgm(mask))?;
    Ok(())
}
