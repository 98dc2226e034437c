//! 8-bit quantisation and PNG file I/O for `[-1, 1]` images.

use std::path::Path;

use crate::error::{Error, Result};

/// Maps `[-1, 1]` to `0..=255` affinely, rounding half to even.
pub fn to_u8(v: f32) -> u8 {
    ((v + 1.0) * 127.5).round_ties_even().clamp(0.0, 255.0) as u8
}

/// Inverse of [`to_u8`] on the 256 representable levels.
pub fn from_u8(u: u8) -> f32 {
    u as f32 / 127.5 - 1.0
}

/// Snaps a value to the nearest 8-bit level so that it survives a PNG
/// round trip unchanged.
pub fn quantize(v: f32) -> f32 {
    from_u8(to_u8(v))
}

pub fn write_png(path: &Path, height: usize, width: usize, rgb: &[u8]) -> Result<()> {
    assert_eq!(rgb.len(), height * width * 3);
    image::save_buffer_with_format(
        path,
        rgb,
        width as u32,
        height as u32,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other),
    })
}

/// Reads an 8-bit RGB PNG, returning `(height, width, interleaved bytes)`.
pub fn read_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let img = reader.with_guessed_format().map_err(|e| Error::io(path, e))?.decode().map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other),
    })?;
    let rgb = img.to_rgb8();
    Ok((rgb.height() as usize, rgb.width() as usize, rgb.into_raw()))
}
