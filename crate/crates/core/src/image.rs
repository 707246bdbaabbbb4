//! RGB images with values in `[0, 1]`.

use std::io::BufWriter;
use std::path::Path;

use crate::error::{Result, RossError};

/// `height x width x 3`, row-major with channel fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(RossError::shape(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(RossError::InvalidRange(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Self {
            height,
            width,
            pixels: rgb.iter().copied().cycle().take(height * width * 3).collect(),
        }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn mse(&self, other: &Image) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / self.pixels.len() as f64
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| RossError::io(path, e))?;
        let mut encoder = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let fmt = |e: png::EncodingError| RossError::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        };
        let mut writer = encoder.write_header().map_err(fmt)?;
        writer.write_image_data(&bytes).map_err(fmt)?;
        Ok(())
    }
}

/// Grayscale map in `[0, 1]` (e.g. a saliency grid) upscaled to an image.
pub fn heatmap(values: &[f64], rows: usize, cols: usize, scale: usize) -> Image {
    let mut img = Image::filled(rows * scale, cols * scale, [0.0; 3]);
    for r in 0..rows * scale {
        for c in 0..cols * scale {
            let v = values[(r / scale) * cols + c / scale].clamp(0.0, 1.0) as f32;
            img.set(r, c, [v, v * 0.5, 0.0]);
        }
    }
    img
}
