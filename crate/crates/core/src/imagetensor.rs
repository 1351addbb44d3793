//! H×W×3 float images in [0,1], the unit of all synthesis and encoding.

use crate::error::{CvError, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    /// RGB interleaved, row-major, length height * width * 3.
    pub data: Vec<f64>,
}

impl ImageTensor {
    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        ImageTensor {
            height,
            width,
            data,
        }
    }

    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i] = rgb[0];
        self.data[i + 1] = rgb[1];
        self.data[i + 2] = rgb[2];
    }

    pub fn clamp_in_place(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|&v| (0.0..=1.0).contains(&v))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let p = self.get(y, x);
                img.put_pixel(
                    x as u32,
                    y as u32,
                    image::Rgb([
                        (p[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                        (p[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                        (p[2].clamp(0.0, 1.0) * 255.0).round() as u8,
                    ]),
                );
            }
        }
        img.save(path)
            .map_err(|e| CvError::Structure(format!("png write {}: {e}", path.display())))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| CvError::Structure(format!("png read {}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = ImageTensor::filled(h, w, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                let p = img.get_pixel(x as u32, y as u32);
                out.set(
                    y,
                    x,
                    [
                        p[0] as f64 / 255.0,
                        p[1] as f64 / 255.0,
                        p[2] as f64 / 255.0,
                    ],
                );
            }
        }
        Ok(out)
    }

    /// Nearest-neighbor resize; deterministic and cheap at toy resolutions.
    pub fn resize(&self, height: usize, width: usize) -> ImageTensor {
        let mut out = ImageTensor::filled(height, width, [0.0; 3]);
        for y in 0..height {
            for x in 0..width {
                let sy = (y * self.height / height).min(self.height - 1);
                let sx = (x * self.width / width).min(self.width - 1);
                out.set(y, x, self.get(sy, sx));
            }
        }
        out
    }
}
