//! Float images and 8-bit PPM/PGM encoding.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// `height × width × channels` image, row-major, channel-last.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Input(format!(
                "empty image {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::Input(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f32] {
        let o = (y * self.width + x) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    /// Flattened `size × size × C` block whose top-left corner is `(y, x)`.
    pub fn block(&self, y: usize, x: usize, size: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(size * size * self.channels);
        for dy in 0..size {
            let o = ((y + dy) * self.width + x) * self.channels;
            out.extend_from_slice(&self.data[o..o + size * self.channels]);
        }
        out
    }

    /// Binary PPM (3 channels) or PGM (1 channel), values clamped to
    /// [0,1] and rounded to 8 bits.
    pub fn to_pnm(&self) -> Result<Vec<u8>> {
        let magic = match self.channels {
            1 => "P5",
            3 => "P6",
            c => return Err(Error::Input(format!("cannot encode {c}-channel image as PNM"))),
        };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| quantize(v)));
        Ok(out)
    }

    pub fn from_pnm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::format("pnm header", "truncated"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_string());
        }
        // Exactly one whitespace byte separates the header from the raster.
        pos += 1;
        let channels = match fields[0].as_str() {
            "P5" => 1,
            "P6" => 3,
            other => return Err(Error::format("pnm magic", format!("unsupported {other:?}"))),
        };
        let parse = |s: &str, name: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::format(format!("pnm {name}"), format!("not a number: {s:?}")))
        };
        let width = parse(&fields[1], "width")?;
        let height = parse(&fields[2], "height")?;
        if parse(&fields[3], "maxval")? != 255 {
            return Err(Error::format("pnm maxval", "only 8-bit rasters are supported"));
        }
        let n = width * height * channels;
        let raster = bytes
            .get(pos..pos + n)
            .ok_or_else(|| Error::format("pnm raster", format!("expected {n} bytes")))?;
        Self::new(height, width, channels, raster.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn save_pnm(&self, path: &Path) -> Result<()> {
        let bytes = self.to_pnm()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_pnm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_pnm(&bytes)
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_on_8bit_values() {
        let data: Vec<f32> = (0..2 * 3 * 3).map(|i| (i * 13 % 256) as f32 / 255.0).collect();
        let img = Image::new(2, 3, 3, data).unwrap();
        let back = Image::from_pnm(&img.to_pnm().unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn pgm_header_and_truncation() {
        let img = Image::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
        let bytes = img.to_pnm().unwrap();
        assert!(bytes.starts_with(b"P5\n2 1\n255\n"));
        assert!(Image::from_pnm(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn empty_image_rejected() {
        assert!(Image::new(0, 4, 3, vec![]).is_err());
    }
}
