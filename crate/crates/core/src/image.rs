use crate::error::{invalid, Result};

/// Grayscale raster with row-major pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid(format!("image dimensions must be positive, got {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(invalid(format!(
                "pixel buffer has {} values, expected {}x{}={}",
                pixels.len(),
                width,
                height,
                width * height
            )));
        }
        if let Some(p) = pixels.iter().find(|p| !p.is_finite() || **p < 0.0 || **p > 1.0) {
            return Err(invalid(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(Self { width, height, pixels })
    }

    /// Builds an image from arbitrary reals, clamping into `[0, 1]`.
    /// Non-finite values map to 0. Returns the image and the number of
    /// pixels that had to be changed.
    pub fn from_clipped(width: usize, height: usize, values: Vec<f64>) -> Result<(Self, usize)> {
        let mut clipped = 0;
        let pixels = values
            .into_iter()
            .map(|v| {
                let c = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
                if c != v {
                    clipped += 1;
                }
                c
            })
            .collect();
        Ok((Self::new(width, height, pixels)?, clipped))
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                pixels.push(f(row, col));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Pixel count `N = W·H`.
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub(crate) fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(invalid(format!(
                "image shapes differ: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_pixels() {
        assert!(Image::new(2, 1, vec![0.0, 1.5]).is_err());
        assert!(Image::new(2, 1, vec![0.0, f64::NAN]).is_err());
        assert!(Image::new(0, 1, vec![]).is_err());
        assert!(Image::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn clipping_counts_changed_pixels() {
        let (img, clipped) = Image::from_clipped(2, 2, vec![-0.5, 0.5, 2.0, f64::INFINITY]).unwrap();
        assert_eq!(img.pixels(), &[0.0, 0.5, 1.0, 0.0]);
        assert_eq!(clipped, 3);
    }
}
