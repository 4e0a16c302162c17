//! 8-bit sRGB PNG previews and inputs, converted to and from linear RGB.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{Mask, RgbImage};

pub fn srgb_to_linear(u: u8) -> f64 {
    let c = u as f64 / 255.0;
    if c <= 0.04045 { c / 12.92 } else { ((c + 0.055) / 1.055).powf(2.4) }
}

pub fn linear_to_srgb(v: f64) -> u8 {
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let c = if v <= 0.0031308 { 12.92 * v } else { 1.055 * v.powf(1.0 / 2.4) - 0.055 };
    (c * 255.0).round().clamp(0.0, 255.0) as u8
}

fn write_raw(path: &Path, width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_source_srgb(png::SrgbRenderingIntent::Perceptual);
    let mut w = enc.write_header()?;
    w.write_image_data(data)?;
    w.finish()?;
    Ok(())
}

/// Writes linear RGB as sRGB-tagged 8-bit PNG (values clamped to [0, 1]).
pub fn write_rgb(path: &Path, image: &RgbImage) -> Result<()> {
    let data: Vec<u8> = image.data.iter().flat_map(|p| p.map(linear_to_srgb)).collect();
    write_raw(path, image.width, image.height, png::ColorType::Rgb, &data)
}

/// Writes raw values in [0, 1] without the sRGB curve (e.g. PNCC codes).
pub fn write_rgb_raw(path: &Path, image: &RgbImage) -> Result<()> {
    let data: Vec<u8> = image
        .data
        .iter()
        .flat_map(|p| p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    write_raw(path, image.width, image.height, png::ColorType::Rgb, &data)
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let data: Vec<u8> = mask.data.iter().map(|&m| if m { 255 } else { 0 }).collect();
    write_raw(path, mask.width, mask.height, png::ColorType::Grayscale, &data)
}

/// Decoded 8-bit RGB samples.
fn read_rgb8(path: &Path) -> Result<(usize, usize, Vec<[u8; 3]>)> {
    let mut dec = png::Decoder::new(BufReader::new(File::open(path)?));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = dec.read_info()?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Png("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    let px: Vec<[u8; 3]> = match info.color_type {
        png::ColorType::Rgb => bytes.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        png::ColorType::Rgba => bytes.chunks_exact(4).map(|c| [c[0], c[1], c[2]]).collect(),
        png::ColorType::Grayscale => bytes.iter().map(|&g| [g; 3]).collect(),
        png::ColorType::GrayscaleAlpha => bytes.chunks_exact(2).map(|c| [c[0]; 3]).collect(),
        png::ColorType::Indexed => return Err(Error::Png("unexpanded palette".into())),
    };
    if px.len() != w * h {
        return Err(Error::Png(format!("unexpected row layout in {}", path.display())));
    }
    Ok((w, h, px))
}

/// Reads a PNG as linear RGB.
pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let (w, h, px) = read_rgb8(path)?;
    RgbImage::from_vec(w, h, px.into_iter().map(|p| p.map(srgb_to_linear)).collect())
}

/// Reads raw values (no sRGB curve) scaled to [0, 1].
pub fn read_rgb_raw(path: &Path) -> Result<RgbImage> {
    let (w, h, px) = read_rgb8(path)?;
    RgbImage::from_vec(w, h, px.into_iter().map(|p| p.map(|v| v as f64 / 255.0)).collect())
}

/// Any nonzero pixel is inside the mask.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let (w, h, px) = read_rgb8(path)?;
    Mask::from_vec(w, h, px.into_iter().map(|p| p.iter().any(|&v| v > 0)).collect())
}
