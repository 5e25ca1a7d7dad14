use crate::error::{GrappaError, Result};

/// Row-major `H × W × C` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(GrappaError::Shape(format!(
                "{} pixels for a {height}x{width}x{channels} image",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            pixels: vec![0.0; height * width * channels],
        }
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let i = self.index(y, x, c);
        self.pixels[i] = v;
    }

    /// Bilinear sample at continuous coordinates (pixel centers at `i + 0.5`),
    /// clamped at the border.
    pub fn sample_bilinear(&self, y: f32, x: f32, c: usize) -> f32 {
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f32);
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f32);
        let y0 = fy.floor() as usize;
        let x0 = fx.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let wy = fy - y0 as f32;
        let wx = fx - x0 as f32;
        let top = self.get(y0, x0, c) * (1.0 - wx) + self.get(y0, x1, c) * wx;
        let bottom = self.get(y1, x0, c) * (1.0 - wx) + self.get(y1, x1, c) * wx;
        top * (1.0 - wy) + bottom * wy
    }
}
