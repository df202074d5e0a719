use spi_core::Image;

use crate::error::{invalid, Error, Result};

/// Dense `N×C×H×W` activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { shape: [n, c, h, w], data: vec![0.0; n * c * h * w] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(invalid(format!("{} values do not fill shape {shape:?}", data.len())));
        }
        Ok(Self { shape, data })
    }

    /// Stacks single-channel images of identical size.
    pub fn from_images(images: &[Image]) -> Result<Self> {
        let first = images.first().ok_or_else(|| invalid("empty image batch"))?;
        let (h, w) = (first.height(), first.width());
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            if img.height() != h || img.width() != w {
                return Err(invalid(format!(
                    "batch mixes {}x{} and {}x{} images",
                    w,
                    h,
                    img.width(),
                    img.height()
                )));
            }
            data.extend_from_slice(img.pixels());
        }
        Ok(Self { shape: [images.len(), 1, h, w], data })
    }

    pub fn to_images(&self) -> Result<Vec<Image>> {
        if self.c() != 1 {
            return Err(invalid(format!("cannot convert a {}-channel tensor to images", self.c())));
        }
        (0..self.n())
            .map(|i| Ok(Image::from_clipped(self.w(), self.h(), self.item(i).to_vec())?.0))
            .collect()
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn item(&self, i: usize) -> &[f64] {
        let len = self.item_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Selects batch items by index.
    pub fn select(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.item_len());
        for &i in indices {
            data.extend_from_slice(self.item(i));
        }
        Tensor { shape: [indices.len(), self.c(), self.h(), self.w()], data }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub(crate) fn check_finite(&self, layer: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NumericalFailure { layer: layer.to_string() })
        }
    }
}
