//! Simulated photodiode readings `y = Φ·vec(x) + q`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{invalid, Result};
use crate::image::Image;
use crate::walsh::ScanningBasis;

/// Length-`K` measurement vector together with the noise it was drawn under.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementVector {
    pub values: Vec<f64>,
    /// Standard deviation of the additive Gaussian noise.
    pub noise_sigma: f64,
    /// `σ / N`, the noise level used to index experiments.
    pub noise_level: f64,
}

impl MeasurementVector {
    /// Noise-free measurements, e.g. for hand-built test vectors.
    pub fn exact(values: Vec<f64>) -> Self {
        Self { values, noise_sigma: 0.0, noise_level: 0.0 }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Draws `k` i.i.d. `N(0, σ²)` samples. `σ = 0` yields exact zeros and does
/// not consume the generator.
pub fn sample_noise<R: Rng + ?Sized>(sigma: f64, k: usize, rng: &mut R) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(invalid(format!("noise sigma must be finite and non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(vec![0.0; k]);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| invalid(e.to_string()))?;
    Ok((0..k).map(|_| normal.sample(rng)).collect())
}

/// Measures `x` through `phi` and adds Gaussian noise of deviation `sigma`.
pub fn acquire<R: Rng + ?Sized>(
    x: &Image,
    phi: &ScanningBasis,
    sigma: f64,
    rng: &mut R,
) -> Result<MeasurementVector> {
    if x.len() != phi.n() {
        return Err(invalid(format!(
            "image has {} pixels but the basis expects {}",
            x.len(),
            phi.n()
        )));
    }
    let noise = sample_noise(sigma, phi.k(), rng)?;
    let mut values = phi.apply(x.pixels());
    for (v, q) in values.iter_mut().zip(noise) {
        *v += q;
    }
    Ok(MeasurementVector { values, noise_sigma: sigma, noise_level: sigma / phi.n() as f64 })
}

/// Noise stream for image `index` of a batch: ChaCha8 seeded with `base_seed`,
/// stream number `index`.
pub fn image_rng(base_seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(index as u64);
    rng
}

/// Acquires a batch in parallel. Image `i` draws its noise from
/// [`image_rng`]`(base_seed, i)`, so results do not depend on scheduling.
pub fn acquire_batch(
    images: &[Image],
    phi: &ScanningBasis,
    sigma: f64,
    base_seed: u64,
) -> Result<Vec<MeasurementVector>> {
    images
        .par_iter()
        .enumerate()
        .map(|(i, x)| acquire(x, phi, sigma, &mut image_rng(base_seed, i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::walsh::build_scanning_basis;
    use nalgebra::DMatrix;

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(w, h, (0..w * h).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn zero_sigma_gives_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_noise(0.0, 5, &mut rng).unwrap(), vec![0.0; 5]);
    }

    #[test]
    fn negative_sigma_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_noise(-1.0, 5, &mut rng).is_err());
        assert!(sample_noise(f64::NAN, 5, &mut rng).is_err());
    }

    #[test]
    fn noise_moments_match_unit_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let q = sample_noise(1.0, 100_000, &mut rng).unwrap();
        let mean = q.iter().sum::<f64>() / q.len() as f64;
        let var = q.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / q.len() as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn noise_is_reproducible() {
        let a = sample_noise(0.3, 50, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_noise(0.3, 50, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn all_ones_through_uniform_row() {
        let x = Image::filled(2, 2, 1.0).unwrap();
        let phi = ScanningBasis::from_matrix(DMatrix::from_element(1, 4, 0.5)).unwrap();
        let y = acquire(&x, &phi, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(y.values, vec![2.0]);
    }

    #[test]
    fn zero_image_measures_zero() {
        let x = Image::filled(4, 4, 0.0).unwrap();
        let phi = build_scanning_basis(7, 16, 1).unwrap();
        let y = acquire(&x, &phi, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(y.values, vec![0.0; 7]);
    }

    #[test]
    fn matches_naive_product() {
        let x = random_image(8, 8, 3);
        let phi = build_scanning_basis(16, 64, 2).unwrap();
        let y = acquire(&x, &phi, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let m = phi.matrix();
        for r in 0..16 {
            let mut acc = 0.0;
            for row in 0..8 {
                for col in 0..8 {
                    acc += m[(r, row * 8 + col)] * x.get(row, col);
                }
            }
            assert!((acc - y.values[r]).abs() < 1e-12);
        }
    }

    #[test]
    fn records_noise_metadata() {
        let x = random_image(4, 4, 0);
        let phi = build_scanning_basis(4, 16, 0).unwrap();
        let y = acquire(&x, &phi, 0.16, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(y.noise_sigma, 0.16);
        assert!((y.noise_level - 0.01).abs() < 1e-15);
    }

    #[test]
    fn noise_is_additive() {
        let x = random_image(8, 8, 5);
        let phi = build_scanning_basis(20, 64, 5).unwrap();
        let clean = acquire(&x, &phi, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let noisy = acquire(&x, &phi, 0.5, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        let draw = sample_noise(0.5, 20, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
        for ((n, c), q) in noisy.values.iter().zip(&clean.values).zip(&draw) {
            // noisy = fl(Φx + q) exactly
            assert_eq!(*n, c + q);
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let x = random_image(4, 4, 0);
        let phi = build_scanning_basis(4, 64, 0).unwrap();
        assert!(acquire(&x, &phi, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn batch_streams_are_per_image() {
        let imgs: Vec<Image> = (0..4).map(|s| random_image(4, 4, s)).collect();
        let phi = build_scanning_basis(8, 16, 0).unwrap();
        let batch = acquire_batch(&imgs, &phi, 0.2, 123).unwrap();
        for (i, x) in imgs.iter().enumerate() {
            let single = acquire(x, &phi, 0.2, &mut image_rng(123, i)).unwrap();
            assert_eq!(batch[i], single);
        }
    }
}
