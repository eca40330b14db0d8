//! Square RGB images and scalar grids.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::{Error, Result};

/// Square row-major grid of `size × size` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    size: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(size: usize, value: T) -> Self {
        Grid {
            size,
            data: vec![value; size * size],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(size: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != size * size {
            return Err(Error::shape("grid", size * size, data.len()));
        }
        Ok(Grid { size, data })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.size + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.size + x] = v;
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            size: self.size,
            data: self.data.iter().map(f).collect(),
        }
    }
}

/// RGB image with channels interleaved, values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    size: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn filled(size: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(size * size * 3);
        for _ in 0..size * size {
            data.extend_from_slice(&rgb);
        }
        Image { size, data }
    }

    pub fn from_vec(size: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != size * size * 3 {
            return Err(Error::shape("image", size * size * 3, data.len()));
        }
        Ok(Image { size, data })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.size + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(size: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != size * size * 3 {
            return Err(Error::shape("8-bit image", size * size * 3, bytes.len()));
        }
        Ok(Image {
            size,
            data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        })
    }

    /// Round-trip through 8-bit storage.
    pub fn quantized(&self) -> Self {
        Self::from_rgb8(self.size, &self.to_rgb8()).expect("same size")
    }

    /// Average-pool by an integer factor that divides the size.
    pub fn avg_pool(&self, factor: usize) -> Result<Image> {
        if factor == 0 || !self.size.is_multiple_of(factor) {
            return Err(Error::Input(format!(
                "pool factor {factor} does not divide image size {}",
                self.size
            )));
        }
        let out_size = self.size / factor;
        let mut out = vec![0.0f32; out_size * out_size * 3];
        let inv = 1.0 / (factor * factor) as f64;
        for oy in 0..out_size {
            for ox in 0..out_size {
                let mut acc = [0.0f64; 3];
                for dy in 0..factor {
                    for dx in 0..factor {
                        let p = self.pixel(ox * factor + dx, oy * factor + dy);
                        for c in 0..3 {
                            acc[c] += p[c] as f64;
                        }
                    }
                }
                for c in 0..3 {
                    out[(oy * out_size + ox) * 3 + c] = (acc[c] * inv) as f32;
                }
            }
        }
        Ok(Image {
            size: out_size,
            data: out,
        })
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        write_rgb_png(path, self.size, self.size, &self.to_rgb8())
    }

    pub fn read_png(path: &Path) -> Result<Image> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let decoder = png::Decoder::new(std::io::BufReader::new(file));
        let mut reader = decoder
            .read_info()
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::format(path.display().to_string(), "image too large"))?;
        let mut buf = vec![0u8; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::format(
                path.display().to_string(),
                "expected 8-bit RGB",
            ));
        }
        if info.width != info.height {
            return Err(Error::format(
                path.display().to_string(),
                "expected a square image",
            ));
        }
        buf.truncate(info.buffer_size());
        Image::from_rgb8(info.width as usize, &buf)
    }
}

/// Write raw 8-bit RGB pixels as a PNG.
pub fn write_rgb_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let fail = |e: png::EncodingError| Error::format(path.display().to_string(), e.to_string());
    let mut writer = encoder.write_header().map_err(fail)?;
    writer.write_image_data(rgb).map_err(fail)?;
    writer.finish().map_err(fail)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_preserves_quantized_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let data: Vec<f32> = (0..4 * 4 * 3).map(|i| (i as f32 * 0.071) % 1.0).collect();
        let img = Image::from_vec(4, data).unwrap().quantized();
        img.write_png(&path).unwrap();
        assert_eq!(Image::read_png(&path).unwrap(), img);
    }

    #[test]
    fn avg_pool_of_constant_is_constant() {
        let img = Image::filled(8, [0.2, 0.4, 0.6]);
        let p = img.avg_pool(4).unwrap();
        assert_eq!(p.size(), 2);
        for v in p.data().chunks(3) {
            assert!((v[0] - 0.2).abs() < 1e-7 && (v[2] - 0.6).abs() < 1e-7);
        }
        assert!(img.avg_pool(3).is_err());
    }
}
