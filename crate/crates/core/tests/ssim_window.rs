//! SSIM against a direct per-window evaluation with 2-D Gaussian weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spi_core::metrics::{ssim, SSIM_SIGMA, SSIM_WINDOW};
use spi_core::Image;

fn window_oracle(x: &Image, y: &Image) -> f64 {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut weights = vec![0.0; SSIM_WINDOW * SSIM_WINDOW];
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let d2 = (i as f64 - half).powi(2) + (j as f64 - half).powi(2);
            weights[i * SSIM_WINDOW + j] = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let (c1, c2) = (1e-4, 9e-4);
    let mut acc = 0.0;
    let mut count = 0;
    for r in 0..=x.height() - SSIM_WINDOW {
        for c in 0..=x.width() - SSIM_WINDOW {
            let at = |img: &Image, i: usize| img.get(r + i / SSIM_WINDOW, c + i % SSIM_WINDOW);
            let mx: f64 = (0..weights.len()).map(|i| weights[i] * at(x, i)).sum();
            let my: f64 = (0..weights.len()).map(|i| weights[i] * at(y, i)).sum();
            let vx: f64 = (0..weights.len()).map(|i| weights[i] * (at(x, i) - mx).powi(2)).sum();
            let vy: f64 = (0..weights.len()).map(|i| weights[i] * (at(y, i) - my).powi(2)).sum();
            let cov: f64 = (0..weights.len()).map(|i| weights[i] * (at(x, i) - mx) * (at(y, i) - my)).sum();
            acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    acc / count as f64
}

#[test]
fn matches_direct_window_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for i in 0..20 {
        let (w, h) = (11 + rng.random_range(0..10), 11 + rng.random_range(0..10));
        let x = Image::new(w, h, (0..w * h).map(|_| rng.random::<f64>()).collect()).unwrap();
        let mix = i as f64 / 19.0;
        let y = Image::from_fn(w, h, |r, c| (1.0 - mix) * x.get(r, c) + mix * rng_free_noise(r, c, i)).unwrap();
        let (got, expect) = (ssim(&x, &y).unwrap(), window_oracle(&x, &y));
        assert!((got - expect).abs() <= 1e-8, "pair {i}: {got} vs {expect}");
    }
}

// deterministic texture so the partner image does not need a second generator
fn rng_free_noise(r: usize, c: usize, i: usize) -> f64 {
    (((r * 31 + c * 17 + i * 7) % 23) as f64) / 22.0
}
