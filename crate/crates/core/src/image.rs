//! Planar-interleaved float images and PNG / raw-float I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major, channel-interleaved float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = self.index(x, y, c);
        self.data[i] = v;
    }

    pub fn check_same_shape(&self, other: &Image, what: &'static str) -> Result<()> {
        if self.shape() == other.shape() {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                what,
                left: self.shape(),
                right: other.shape(),
            })
        }
    }

    /// Multiplies every channel of each pixel by a single-channel mask.
    pub fn masked(&self, mask: &Image) -> Result<Image> {
        if mask.width != self.width || mask.height != self.height || mask.channels != 1 {
            return Err(Error::ShapeMismatch {
                what: "mask",
                left: self.shape(),
                right: mask.shape(),
            });
        }
        let mut out = self.clone();
        for p in 0..self.pixel_count() {
            let m = mask.data[p];
            for c in 0..self.channels {
                out.data[p * self.channels + c] *= m;
            }
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let out = match img {
            image::DynamicImage::ImageLuma8(buf) => Image {
                width: w,
                height: h,
                channels: 1,
                data: buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
            },
            other => Image {
                width: w,
                height: h,
                channels: 3,
                data: other
                    .to_rgb8()
                    .into_raw()
                    .into_iter()
                    .map(|v| v as f64 / 255.0)
                    .collect(),
            },
        };
        Ok(out)
    }

    /// Quantized 8-bit bytes, clamping to `[0, 1]`.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// Writes a 1-channel image as 8-bit grayscale or a 3-channel image as RGB.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            n => return Err(Error::Invalid(format!("cannot write {n}-channel PNG"))),
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        image::save_buffer(
            path,
            &self.to_u8(),
            self.width as u32,
            self.height as u32,
            color,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Rounds every value to what an 8-bit PNG round-trip would return.
    pub fn quantized_u8(&self) -> Image {
        let mut out = self.clone();
        for (o, b) in out.data.iter_mut().zip(self.to_u8()) {
            *o = b as f64 / 255.0;
        }
        out
    }
}

pub fn write_f32_le(path: &Path, values: impl IntoIterator<Item = f64>) -> Result<()> {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32_le(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::data(path, "length is not a multiple of 4 bytes"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}
