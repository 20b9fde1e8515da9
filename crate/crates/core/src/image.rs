use std::path::Path;

use crate::error::{CoreError, Result};

/// An RGB image with `f64` samples in [0, 1], stored channel-major
/// (plane order R, G, B; row-major within a plane).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

pub const CHANNELS: usize = 3;

impl ImageBuffer {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(CoreError::invalid("image dimensions must be positive"));
        }
        if data.len() != CHANNELS * height * width {
            return Err(CoreError::invalid(format!(
                "image data length {} does not match 3x{height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CoreError::invalid("pixel values must lie in [0, 1]"));
        }
        Ok(ImageBuffer { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Result<Self> {
        let mut data = vec![0.0; CHANNELS * height * width];
        for (c, chunk) in data.chunks_mut(height * width).enumerate() {
            chunk.fill(rgb[c]);
        }
        ImageBuffer::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data[(c * self.height + row) * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, c: usize, row: usize, col: usize, v: f64) {
        debug_assert!((0.0..=1.0).contains(&v), "pixel value {v} outside [0, 1]");
        self.data[(c * self.height + row) * self.width + col] = v;
    }

    /// Per-channel mean over every pixel of the image.
    pub fn channel_means(&self) -> [f64; 3] {
        let n = (self.height * self.width) as f64;
        let mut means = [0.0; 3];
        for (c, mean) in means.iter_mut().enumerate() {
            let plane = &self.data[c * self.height * self.width..(c + 1) * self.height * self.width];
            *mean = plane.iter().sum::<f64>() / n;
        }
        means
    }

    /// Mean over all samples of all channels.
    pub fn global_mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut out = image::RgbImage::new(self.width as u32, self.height as u32);
        for row in 0..self.height {
            for col in 0..self.width {
                let px = [
                    to_u8(self.get(0, row, col)),
                    to_u8(self.get(1, row, col)),
                    to_u8(self.get(2, row, col)),
                ];
                out.put_pixel(col as u32, row as u32, image::Rgb(px));
            }
        }
        out.save(path).map_err(|source| CoreError::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| CoreError::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; CHANNELS * h * w];
        for (col, row, px) in img.enumerate_pixels() {
            for c in 0..CHANNELS {
                data[(c * h + row as usize) * w + col as usize] = px.0[c] as f64 / 255.0;
            }
        }
        ImageBuffer::new(h, w, data)
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(ImageBuffer::new(2, 2, vec![1.5; 12]).is_err());
        assert!(ImageBuffer::new(2, 2, vec![0.5; 12]).is_ok());
    }

    #[test]
    fn channel_means_per_plane() {
        let mut img = ImageBuffer::filled(2, 2, [0.0, 0.5, 1.0]).unwrap();
        img.set(0, 0, 0, 1.0);
        let m = img.channel_means();
        assert_abs_diff_eq!(m[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(m[1], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(m[2], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn png_roundtrip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = ImageBuffer::filled(4, 6, [0.2, 0.4, 0.8]).unwrap();
        img.save_png(&path).unwrap();
        let back = ImageBuffer::load_png(&path).unwrap();
        assert_eq!(back.height(), 4);
        assert_eq!(back.width(), 6);
        for c in 0..3 {
            assert_abs_diff_eq!(back.get(c, 0, 0), img.get(c, 0, 0), epsilon = 0.5 / 255.0);
        }
    }
}
