use proptest::prelude::*;
use spi_pipeline::config::patterns_for;
use spi_pipeline::experiments::{mean_std, median, TimingModel};
use spi_pipeline::Settings;

proptest! {
    #[test]
    fn pattern_count_is_within_range(sr in 1e-6..=1.0f64, log_n in 0u32..14) {
        let n = 1usize << log_n;
        let k = patterns_for(sr, n);
        prop_assert!(k >= 1 && k <= n);
        prop_assert!((k as f64 - sr * n as f64).abs() <= 0.5 || k == 1);
    }

    #[test]
    fn timing_is_self_consistent(k in 1usize..100_000, rate in 1.0..1e6f64, rec in 0.0..10.0f64) {
        let t = TimingModel::new(k, rate, rec).unwrap();
        prop_assert!((t.fps * t.total_s - 1.0).abs() < 1e-9);
        prop_assert!(t.acquisition_s > 0.0 && t.total_s >= t.reconstruction_s);
        let doubled = TimingModel::new(k, 2.0 * rate, rec).unwrap();
        prop_assert!((2.0 * doubled.acquisition_s - t.acquisition_s).abs() <= 1e-15 * t.acquisition_s.max(1.0));
    }

    #[test]
    fn spread_statistics_are_sane(values in prop::collection::vec(-100.0..100.0f64, 1..40)) {
        let (mean, std) = mean_std(&values);
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(mean >= lo - 1e-9 && mean <= hi + 1e-9);
        prop_assert!(std >= 0.0 && std <= (hi - lo) + 1e-9);
        let mut v = values.clone();
        let m = median(&mut v);
        prop_assert!(m >= lo && m <= hi);
    }

    #[test]
    fn later_settings_layers_win(a in 0.01..=1.0f64, b in 0.01..=1.0f64) {
        let mut s = Settings::default();
        s.apply_text(&format!("sr={a}")).unwrap();
        s.set("sr", &b.to_string()).unwrap();
        prop_assert_eq!(s.sr, b);
    }
}
