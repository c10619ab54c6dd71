use ::image::{imageops, ImageBuffer, Luma};

use crate::domain::FlipAxis;
use crate::error::{Error, Result};

/// Single-channel image with intensities nominally in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize) -> Self {
        GrayImage {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("gray image", height * width, data.len()));
        }
        Ok(GrayImage { height, width, data })
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn flipped(&self, axis: FlipAxis) -> GrayImage {
        let mut out = GrayImage::new(self.height, self.width);
        crate::domain::stack_flip_plane(&self.data, &mut out.data, self.height, self.width, axis);
        out
    }

    /// Bilinear (triangle-filter) resampling to `height x width`.
    pub fn resized(&self, height: usize, width: usize) -> GrayImage {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone())
                .expect("buffer length matches dimensions");
        let out = imageops::resize(&buf, width as u32, height as u32, imageops::FilterType::Triangle);
        GrayImage {
            height,
            width,
            data: out.into_raw(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn std(&self) -> f64 {
        let m = self.mean();
        let var = self.data.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / self.data.len().max(1) as f64;
        var.sqrt()
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }
}
