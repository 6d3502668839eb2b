//! RGB float images and 8-bit PNG I/O.

use std::io::{BufReader, Cursor};
use std::path::Path;

use crate::error::{Error, Result};

/// Height x width x 3 image, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::shape("image", format!("{height}x{width}x3 needs {} values, got {}", height * width * 3, data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn clamped(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    pub fn mse(&self, other: &Image) -> Result<f64> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shape("mse", "image sizes differ"));
        }
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
        Ok(s / self.data.len() as f64)
    }

    /// Nearest-neighbour 2x enlargement.
    pub fn upsample_nearest(&self) -> Image {
        let (h, w) = (self.height * 2, self.width * 2);
        let mut out = Image::filled(h, w, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                out.set_pixel(y, x, self.pixel(y / 2, x / 2));
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn to_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut writer = enc.write_header().map_err(|e| Error::data(e.to_string()))?;
            writer.write_image_data(&self.to_rgb8()).map_err(|e| Error::data(e.to_string()))?;
        }
        Ok(out)
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let dec = png::Decoder::new(BufReader::new(Cursor::new(bytes)));
        let mut reader = dec.read_info().map_err(|e| Error::data(format!("png: {e}")))?;
        let size = reader.output_buffer_size().ok_or_else(|| Error::data("png: image too large"))?;
        let mut buf = vec![0u8; size];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::data(format!("png: {e}")))?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::data("png: expected 8-bit RGB"));
        }
        Self::from_rgb8(info.height as usize, info.width as usize, &buf[..info.buffer_size()])
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_png()?)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        Self::from_png(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_for_8bit_values() {
        let bytes: Vec<u8> = (0..4 * 6 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let img = Image::from_rgb8(4, 6, &bytes).unwrap();
        let back = Image::from_png(&img.to_png().unwrap()).unwrap();
        assert_eq!(back.to_rgb8(), bytes);
    }

    #[test]
    fn nearest_upsample_doubles() {
        let img = Image::from_rgb8(1, 2, &[0, 0, 0, 255, 255, 255]).unwrap();
        let up = img.upsample_nearest();
        assert_eq!((up.height(), up.width()), (2, 4));
        assert_eq!(up.pixel(1, 3), [1.0, 1.0, 1.0]);
        assert_eq!(up.pixel(1, 1), [0.0, 0.0, 0.0]);
    }
}
