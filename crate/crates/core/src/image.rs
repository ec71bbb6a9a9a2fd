//! Raw image buffers in the 0..=255 intensity scale.
//!
//! Perturbations operate on these buffers before any model preprocessing, so
//! the values kept here are exactly what would be written back to disk.

use std::path::Path;

use image::{imageops, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};

/// Interleaved (row, column, channel) image with `f64` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidInput(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} samples for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Image {
            height,
            width,
            channels,
            data,
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    /// Samples of pixel `(y, x)` across channels.
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let start = self.index(y, x, 0);
        &self.data[start..start + self.channels]
    }

    /// Decodes a PNG or JPEG file into `channels` channels (1 = luma, 3 = RGB).
    pub fn open(path: &Path, channels: usize) -> Result<Self> {
        let err = |reason: String| Error::Image {
            path: path.to_path_buf(),
            reason,
        };
        let decoded = image::ImageReader::open(path)
            .map_err(|e| err(e.to_string()))?
            .with_guessed_format()
            .map_err(|e| err(e.to_string()))?
            .decode()
            .map_err(|e| err(e.to_string()))?;
        let (w, h) = (decoded.width() as usize, decoded.height() as usize);
        match channels {
            1 => {
                let buf = decoded.to_luma8();
                Image::new(h, w, 1, buf.into_raw().into_iter().map(f64::from).collect())
            }
            3 => {
                let buf = decoded.to_rgb8();
                Image::new(h, w, 3, buf.into_raw().into_iter().map(f64::from).collect())
            }
            n => Err(err(format!("unsupported channel count {n}"))),
        }
    }

    /// Bilinear (triangle filter) resize; returns a clone when already at size.
    pub fn resized(&self, height: usize, width: usize) -> Image {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let (w32, h32) = (width as u32, height as u32);
        // Float buffers are clamped to [0, 1] by the resampler.
        let samples: Vec<f32> = self.data.iter().map(|&v| (v / 255.0) as f32).collect();
        let data: Vec<f32> = match self.channels {
            1 => {
                let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
                    ImageBuffer::from_raw(self.width as u32, self.height as u32, samples)
                        .expect("buffer sized from image dimensions");
                imageops::resize(&buf, w32, h32, imageops::FilterType::Triangle).into_raw()
            }
            3 => {
                let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
                    ImageBuffer::from_raw(self.width as u32, self.height as u32, samples)
                        .expect("buffer sized from image dimensions");
                imageops::resize(&buf, w32, h32, imageops::FilterType::Triangle).into_raw()
            }
            _ => {
                // Generic path: nearest neighbour per channel.
                let mut out = Vec::with_capacity(height * width * self.channels);
                for y in 0..height {
                    let sy = (y * self.height) / height;
                    for x in 0..width {
                        let sx = (x * self.width) / width;
                        out.extend(self.pixel(sy, sx).iter().map(|&v| (v / 255.0) as f32));
                    }
                }
                out
            }
        };
        Image {
            height,
            width,
            channels: self.channels,
            data: data.into_iter().map(|v| f64::from(v) * 255.0).collect(),
        }
    }

    /// Expands to three channels (gray images are replicated).
    pub fn to_rgb(&self) -> Image {
        match self.channels {
            3 => self.clone(),
            _ => Image::from_fn(self.height, self.width, 3, |y, x, _| self.get(y, x, 0)),
        }
    }

    /// Rounds and clamps samples to 8 bits.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| v.round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (w, h) = (self.width as u32, self.height as u32);
        let res = match self.channels {
            1 => image::save_buffer(path, &self.to_u8(), w, h, image::ColorType::L8),
            3 => image::save_buffer(path, &self.to_u8(), w, h, image::ColorType::Rgb8),
            n => {
                return Err(Error::InvalidInput(format!(
                    "cannot write a {n}-channel image as PNG"
                )))
            }
        };
        res.map_err(|e| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Image::new(0, 2, 1, vec![]).is_err());
        assert!(Image::new(2, 2, 1, vec![0.0; 3]).is_err());
    }

    #[test]
    fn resize_same_size_is_identity() {
        let img = Image::from_fn(4, 5, 3, |y, x, c| (y * 100 + x * 10 + c) as f64);
        assert_eq!(img.resized(4, 5), img);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = Image::filled(6, 6, 1, 42.0);
        let r = img.resized(3, 9);
        assert_eq!((r.height(), r.width()), (3, 9));
        assert!(r.data().iter().all(|&v| (v - 42.0).abs() < 1e-4));
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        let img = Image::from_fn(3, 4, 3, |y, x, c| ((y * 4 + x) * 3 + c) as f64 * 7.0);
        img.save_png(&path).unwrap();
        let back = Image::open(&path, 3).unwrap();
        assert_eq!(back, img);
    }
}
