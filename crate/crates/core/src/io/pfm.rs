//! Portable float maps: little-endian, rows stored bottom to top.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{RgbImage, ScalarMap};

/// Raw decoded float map, rows top to bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct Pfm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Pfm {
    pub fn encode(&self) -> Vec<u8> {
        let tag = if self.channels == 3 { "PF" } else { "Pf" };
        let mut out = format!("{tag}\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        let row = self.width * self.channels;
        out.reserve(4 * self.data.len());
        for y in (0..self.height).rev() {
            for v in &self.data[y * row..(y + 1) * row] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Pfm> {
        let bad = |m: &str| Error::Format(format!("pfm: {m}"));
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ascii"))?);
        }
        pos += 1;
        let channels = match fields[0] {
            "PF" => 3,
            "Pf" => 1,
            _ => return Err(bad("unknown magic")),
        };
        let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
        let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
        let scale: f64 = fields[3].parse().map_err(|_| bad("bad scale"))?;
        if scale == 0.0 || !scale.is_finite() {
            return Err(bad("bad scale"));
        }
        let n = width * height * channels;
        let body = bytes.get(pos..).unwrap_or(&[]);
        if body.len() < 4 * n {
            return Err(bad("truncated data"));
        }
        let row = width * channels;
        let mut data = vec![0f32; n];
        for (k, chunk) in body[..4 * n].chunks_exact(4).enumerate() {
            let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
            let v = if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
            let (stored_row, col) = (k / row, k % row);
            data[(height - 1 - stored_row) * row + col] = v;
        }
        Ok(Pfm { width, height, channels, data })
    }
}

pub fn write_rgb(path: &Path, image: &RgbImage) -> Result<()> {
    let data = image.data.iter().flat_map(|p| p.map(|v| v as f32)).collect();
    fs::write(path, Pfm { width: image.width, height: image.height, channels: 3, data }.encode())?;
    Ok(())
}

pub fn write_scalar(path: &Path, map: &ScalarMap) -> Result<()> {
    let data = map.data.iter().map(|&v| v as f32).collect();
    fs::write(path, Pfm { width: map.width, height: map.height, channels: 1, data }.encode())?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Pfm> {
    Pfm::decode(&fs::read(path)?)
}

/// Reads a 3-channel map; a 1-channel map is replicated to gray.
pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let p = read(path)?;
    let data = if p.channels == 3 {
        p.data.chunks_exact(3).map(|c| [c[0] as f64, c[1] as f64, c[2] as f64]).collect()
    } else {
        p.data.iter().map(|&v| [v as f64; 3]).collect()
    };
    RgbImage::from_vec(p.width, p.height, data)
}

pub fn read_scalar(path: &Path) -> Result<ScalarMap> {
    let p = read(path)?;
    if p.channels != 1 {
        return Err(Error::Format(format!("{} is not a single-channel pfm", path.display())));
    }
    ScalarMap::from_vec(p.width, p.height, p.data.iter().map(|&v| v as f64).collect())
}
