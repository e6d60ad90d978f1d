use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat};
use thiserror::Error;

use crate::types::{ImageBuffer, ImageBufferError};

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a PNG file")]
    NotPng,
    #[error("unsupported PNG layout {0} (need 8-bit RGB or RGBA)")]
    Unsupported(String),
    #[error("PNG decode failed: {0}")]
    Decode(String),
    #[error("PNG encode failed: {0}")]
    Encode(String),
    #[error(transparent)]
    Buffer(#[from] ImageBufferError),
}

const PNG_MAGIC: &[u8] = b"\x89PNG\r\n\x1a\n";

/// Unit-interval sample to 8 bits, rounding half up.
#[inline]
pub fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// The image exactly as it reads back after an 8-bit PNG round trip.
pub fn quantize_image(buf: &ImageBuffer) -> ImageBuffer {
    let data = buf.data().iter().map(|&v| quantize(v) as f64 / 255.0).collect();
    ImageBuffer::new(buf.width(), buf.height(), buf.channels(), data).expect("same shape, values in [0, 1]")
}

pub fn decode_png(bytes: &[u8]) -> Result<ImageBuffer, ImageIoError> {
    if !bytes.starts_with(PNG_MAGIC) {
        return Err(ImageIoError::NotPng);
    }
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| ImageIoError::Decode(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, raw) = match img {
        DynamicImage::ImageRgb8(b) => (3, b.into_raw()),
        DynamicImage::ImageRgba8(b) => (4, b.into_raw()),
        other => return Err(ImageIoError::Unsupported(format!("{:?}", other.color()))),
    };
    let data = raw.into_iter().map(|v| v as f64 / 255.0).collect();
    Ok(ImageBuffer::new(w, h, channels, data)?)
}

pub fn encode_png(buf: &ImageBuffer) -> Result<Vec<u8>, ImageIoError> {
    let raw: Vec<u8> = buf.data().iter().map(|&v| quantize(v)).collect();
    let color = if buf.has_alpha() { ExtendedColorType::Rgba8 } else { ExtendedColorType::Rgb8 };
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(&raw, buf.width() as u32, buf.height() as u32, color)
        .map_err(|e| ImageIoError::Encode(e.to_string()))?;
    Ok(out)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer, ImageIoError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)
        .map_err(|source| ImageIoError::Io { path: path.display().to_string(), source })?;
    decode_png(&bytes)
}

pub fn save_image(buf: &ImageBuffer, path: impl AsRef<Path>) -> Result<(), ImageIoError> {
    let path = path.as_ref();
    std::fs::write(path, encode_png(buf)?)
        .map_err(|source| ImageIoError::Io { path: path.display().to_string(), source })
}
