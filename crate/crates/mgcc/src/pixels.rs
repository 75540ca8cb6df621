//! Pixel grids and PNG IO.

use crate::error::{MgccError, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// An owned pixel grid, 8-bit per channel, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelImage {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub data: Vec<u8>,
}

impl PixelImage {
    pub fn new(width: u32, height: u32, channels: u32, data: Vec<u8>) -> Result<Self> {
        let expected = (width * height * channels) as usize;
        if data.len() != expected {
            return Err(MgccError::Input(format!(
                "pixel buffer holds {} bytes, {width}x{height}x{channels} needs {expected}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, channels: u32, value: u8) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; (width * height * channels) as usize],
        }
    }

    /// Single-channel grayscale image.
    pub fn gray(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        Self::new(width, height, 1, data)
    }

    pub fn pixel(&self, x: u32, y: u32) -> &[u8] {
        let at = ((y * self.width + x) * self.channels) as usize;
        &self.data[at..at + self.channels as usize]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, value: &[u8]) {
        let at = ((y * self.width + x) * self.channels) as usize;
        self.data[at..at + self.channels as usize].copy_from_slice(value);
    }

    /// Fill the rectangle [x, x+w) × [y, y+h), clipped to the image bounds.
    pub fn fill_rect(&mut self, x: u32, y: u32, w: u32, h: u32, value: &[u8]) {
        let x_end = (x + w).min(self.width);
        let y_end = (y + h).min(self.height);
        for py in y.min(self.height)..y_end {
            for px in x.min(self.width)..x_end {
                self.set_pixel(px, py, value);
            }
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let err = |e: image::ImageError| MgccError::Input(format!("png write {path:?}: {e}"));
        match self.channels {
            1 => {
                let img = image::GrayImage::from_raw(self.width, self.height, self.data.clone())
                    .expect("buffer length already validated");
                img.save_with_format(path, image::ImageFormat::Png).map_err(err)
            }
            3 => {
                let img = image::RgbImage::from_raw(self.width, self.height, self.data.clone())
                    .expect("buffer length already validated");
                img.save_with_format(path, image::ImageFormat::Png).map_err(err)
            }
            c => Err(MgccError::Input(format!("unsupported channel count {c}"))),
        }
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| MgccError::Input(format!("png read {path:?}: {e}")))?;
        match img {
            image::DynamicImage::ImageLuma8(g) => Ok(Self {
                width: g.width(),
                height: g.height(),
                channels: 1,
                data: g.into_raw(),
            }),
            other => {
                let rgb = other.to_rgb8();
                Ok(Self {
                    width: rgb.width(),
                    height: rgb.height(),
                    channels: 3,
                    data: rgb.into_raw(),
                })
            }
        }
    }
}
