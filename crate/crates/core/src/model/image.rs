use std::path::Path;

use crate::error::ModelError;
use crate::tensor::Mat;

/// Square RGB raster with channel values in `[0, 1]`, stored row-major HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    size: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(size: usize, data: Vec<f64>) -> Result<Self, ModelError> {
        if data.len() != size * size * 3 {
            return Err(ModelError::ImageShape {
                expected: size,
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self { size, data })
    }

    pub fn filled(size: usize, rgb: [f64; 3]) -> Self {
        let data = (0..size * size).flat_map(|_| rgb).collect();
        Self { size, data }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.size + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.size + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Flattened patches, one row per patch in raster order.
    pub fn patches(&self, patch: usize) -> Mat {
        let side = self.size / patch;
        let dim = patch * patch * 3;
        let mut out = Mat::zeros(side * side, dim);
        for py in 0..side {
            for px in 0..side {
                let row = out.row_mut(py * side + px);
                let mut k = 0;
                for y in 0..patch {
                    for x in 0..patch {
                        let p = self.pixel(px * patch + x, py * patch + y);
                        row[k..k + 3].copy_from_slice(&p);
                        k += 3;
                    }
                }
            }
        }
        out
    }

    pub fn load_png(path: &Path) -> Result<Self, ModelError> {
        let img = image::open(path)
            .map_err(|e| ModelError::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        if w != h {
            return Err(ModelError::ImageShape {
                expected: w as usize,
                got: format!("{w}x{h}"),
            });
        }
        let data = img.as_raw().iter().map(|&b| b as f64 / 255.0).collect();
        Self::new(w as usize, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ModelError> {
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let buf = image::RgbImage::from_raw(self.size as u32, self.size as u32, bytes)
            .expect("buffer matches dimensions");
        buf.save(path)
            .map_err(|e| ModelError::Image(format!("{}: {e}", path.display())))
    }
}
