//! Image quality measures.

use crate::error::{invalid, Result};
use crate::image::Image;

/// PSNR reported for (numerically) error-free reconstructions.
pub const PSNR_CAP_DB: f64 = 99.0;
const ZERO_MSE: f64 = 1e-12;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityScore {
    pub psnr_db: f64,
    pub ssim: f64,
    pub mse: f64,
}

impl QualityScore {
    /// Scores `estimate` against `reference` with unit peak.
    pub fn compare(reference: &Image, estimate: &Image) -> Result<Self> {
        let mse = mse(reference, estimate)?;
        Ok(Self {
            psnr_db: psnr_from_mse(mse, 1.0, PSNR_CAP_DB),
            ssim: ssim(reference, estimate)?,
            mse,
        })
    }
}

pub fn mse(x: &Image, x_hat: &Image) -> Result<f64> {
    x.check_same_shape(x_hat)?;
    let sum: f64 = x.pixels().iter().zip(x_hat.pixels()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / x.len() as f64)
}

/// `10·log10(peak² / mse)`, or `cap` when the error vanishes.
pub fn psnr(x: &Image, x_hat: &Image, peak: f64, cap: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(invalid(format!("peak must be positive, got {peak}")));
    }
    Ok(psnr_from_mse(mse(x, x_hat)?, peak, cap))
}

pub fn psnr_from_mse(mse: f64, peak: f64, cap: f64) -> f64 {
    if mse < ZERO_MSE {
        return cap;
    }
    (10.0 * (peak * peak / mse).log10()).min(cap)
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Separable Gaussian filter over every fully contained window ("valid" mode).
fn filter_valid(values: &[f64], width: usize, height: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let out_w = width - SSIM_WINDOW + 1;
    let out_h = height - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; height * out_w];
    for r in 0..height {
        for c in 0..out_w {
            let base = r * width + c;
            rows[r * out_w + c] = g.iter().enumerate().map(|(i, w)| w * values[base + i]).sum();
        }
    }
    let mut out = vec![0.0; out_h * out_w];
    for r in 0..out_h {
        for c in 0..out_w {
            out[r * out_w + c] = g.iter().enumerate().map(|(i, w)| w * rows[(r + i) * out_w + c]).sum();
        }
    }
    out
}

/// Mean structural similarity over 11×11 Gaussian windows (σ = 1.5) with
/// `C1 = (0.01)²`, `C2 = (0.03)²` for unit dynamic range.
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    x.check_same_shape(y)?;
    let (w, h) = (x.width(), x.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(invalid(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {w}x{h}")));
    }
    let g = gaussian_window();
    let product = |a: &Image, b: &Image| -> Vec<f64> {
        a.pixels().iter().zip(b.pixels()).map(|(p, q)| p * q).collect()
    };
    let mu_x = filter_valid(x.pixels(), w, h, &g);
    let mu_y = filter_valid(y.pixels(), w, h, &g);
    let e_xx = filter_valid(&product(x, x), w, h, &g);
    let e_yy = filter_valid(&product(y, y), w, h, &g);
    let e_xy = filter_valid(&product(x, y), w, h, &g);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let var_x = e_xx[i] - mx * mx;
        let var_y = e_yy[i] - my * my;
        let cov = e_xy[i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
            / ((mx * mx + my * my + c1) * (var_x + var_y + c2));
    }
    Ok((total / mu_x.len() as f64).clamp(-1.0, 1.0))
}
