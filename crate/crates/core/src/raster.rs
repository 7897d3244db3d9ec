//! RGB raster with channel values in [0, 1].

use std::path::Path;

use image::{Rgb, RgbImage};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("image dimensions must be positive, got {height}x{width}")]
    Dimension { height: u32, width: u32 },
    #[error("pixel buffer has {actual} entries, expected {expected}")]
    Length { expected: usize, actual: usize },
    #[error("image io: {0}")]
    Image(#[from] image::ImageError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    height: u32,
    width: u32,
    pixels: Vec<[f32; 3]>,
}

impl ColorImage {
    pub fn new(height: u32, width: u32, pixels: Vec<[f32; 3]>) -> Result<Self, RasterError> {
        if height == 0 || width == 0 {
            return Err(RasterError::Dimension { height, width });
        }
        let expected = height as usize * width as usize;
        if pixels.len() != expected {
            return Err(RasterError::Length { expected, actual: pixels.len() });
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: u32, width: u32, color: [f32; 3]) -> Result<Self, RasterError> {
        Self::new(height, width, vec![color; height as usize * width as usize])
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn pixels(&self) -> &[[f32; 3]] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [[f32; 3]] {
        &mut self.pixels
    }

    pub fn get(&self, row: u32, col: u32) -> [f32; 3] {
        self.pixels[row as usize * self.width as usize + col as usize]
    }

    pub fn set(&mut self, row: u32, col: u32, value: [f32; 3]) {
        self.pixels[row as usize * self.width as usize + col as usize] = value;
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width, self.height, |x, y| {
            let p = self.get(y, x);
            Rgb(p.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Self, RasterError> {
        let pixels = img
            .pixels()
            .map(|p| p.0.map(|v| v as f32 / 255.0))
            .collect();
        Self::new(img.height(), img.width(), pixels)
    }

    pub fn load(path: &Path) -> Result<Self, RasterError> {
        let img = image::open(path)?.to_rgb8();
        Self::from_rgb8(&img)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RasterError> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

/// sRGB in [0, 1] to CIE L*a*b* (D65).
pub fn srgb_to_lab(rgb: [f32; 3]) -> [f64; 3] {
    fn linear(c: f32) -> f64 {
        let c = c.clamp(0.0, 1.0) as f64;
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    }
    let [r, g, b] = rgb.map(linear);
    let x = (0.4124564 * r + 0.3575761 * g + 0.1804375 * b) / 0.95047;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = (0.0193339 * r + 0.119192 * g + 0.9503041 * b) / 1.08883;
    fn f(t: f64) -> f64 {
        const EPS: f64 = 216.0 / 24389.0;
        const KAPPA: f64 = 24389.0 / 27.0;
        if t > EPS {
            t.cbrt()
        } else {
            (KAPPA * t + 16.0) / 116.0
        }
    }
    let (fx, fy, fz) = (f(x), f(y), f(z));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}
