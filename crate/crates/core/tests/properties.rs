use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spi_core::baselines::dgi_reconstruct;
use spi_core::metrics::{psnr_from_mse, ssim, PSNR_CAP_DB};
use spi_core::{acquire, build_scanning_basis, min_norm_solve, EffectiveMatrix, Image, MeasurementVector, SparsifyingBasis};

fn image(side: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0..=1.0f64, side * side).prop_map(move |p| Image::new(side, side, p).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn basis_rows_are_unit_norm_and_distinct(log_n in 1u32..8, frac in 0.01..1.0f64, seed in any::<u64>()) {
        let n = 1usize << log_n;
        let k = ((frac * n as f64).ceil() as usize).clamp(1, n);
        let phi = build_scanning_basis(k, n, seed).unwrap();
        for row in phi.matrix().row_iter() {
            prop_assert!((row.norm() - 1.0).abs() < 1e-12);
        }
        let mut rows = phi.walsh_rows().unwrap().to_vec();
        rows.sort_unstable();
        rows.dedup();
        prop_assert_eq!(rows.len(), k);
    }

    #[test]
    fn noiseless_acquisition_is_linear(a in image(8), b in image(8), t in 0.0..=1.0f64, seed in any::<u64>()) {
        let phi = build_scanning_basis(24, 64, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mix = Image::from_fn(8, 8, |r, c| t * a.get(r, c) + (1.0 - t) * b.get(r, c)).unwrap();
        let ya = acquire(&a, &phi, 0.0, &mut rng).unwrap();
        let yb = acquire(&b, &phi, 0.0, &mut rng).unwrap();
        let ym = acquire(&mix, &phi, 0.0, &mut rng).unwrap();
        for i in 0..24 {
            prop_assert!((ym.values[i] - (t * ya.values[i] + (1.0 - t) * yb.values[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn min_norm_solution_is_consistent(
        k in 1usize..12,
        extra in 1usize..12,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let n = k + extra;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = DMatrix::from_fn(k, n, |_, _| rng.random_range(-1.0..1.0));
        let y: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eff = EffectiveMatrix::from_matrix(theta.clone(), SparsifyingBasis::identity(n, 1)).unwrap();
        if let Ok(s) = min_norm_solve(&eff, &MeasurementVector::exact(y.clone())) {
            let r = &theta * DVector::from_vec(s) - DVector::from_vec(y);
            prop_assert!(r.norm() < 1e-8);
        }
    }

    #[test]
    fn psnr_is_monotone_and_capped(a in 1e-12..1.0f64, b in 1e-12..1.0f64) {
        let (pa, pb) = (psnr_from_mse(a, 1.0, PSNR_CAP_DB), psnr_from_mse(b, 1.0, PSNR_CAP_DB));
        prop_assert!(pa <= PSNR_CAP_DB && pb <= PSNR_CAP_DB);
        if a < b {
            prop_assert!(pa >= pb);
        }
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(x in image(12), y in image(12)) {
        let (s, t) = (ssim(&x, &y).unwrap(), ssim(&y, &x).unwrap());
        prop_assert!((s - t).abs() < 1e-12);
        prop_assert!(s <= 1.0 + 1e-12 && s >= -1.0);
        prop_assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dgi_output_lies_in_unit_range(x in image(8), seed in any::<u64>()) {
        let phi = build_scanning_basis(20, 64, seed).unwrap();
        let y = acquire(&x, &phi, 0.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let img = dgi_reconstruct(&phi, &y).unwrap().image;
        prop_assert!(img.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
    }
}
