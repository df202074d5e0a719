use proptest::prelude::*;
use spi_core::Image;
use spi_gan::layers::sigmoid;
use spi_gan::losses::{adversarial_from_probs, mse_loss, total_loss, LossWeights};
use spi_gan::{Generator, GeneratorConfig, Tensor};

fn images(count: usize, side: usize) -> impl Strategy<Value = Vec<Image>> {
    prop::collection::vec(prop::collection::vec(0.0..=1.0f64, side * side), count)
        .prop_map(move |v| v.into_iter().map(|p| Image::new(side, side, p).unwrap()).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn composite_loss_is_non_negative(
        mse in 0.0..10.0f64, sim in 0.0..10.0f64, adv in 0.0..10.0f64,
        ws in 0.0..1.0f64, wa in 0.0..1.0f64,
    ) {
        let weights = LossWeights { sim: ws, adv: wa };
        prop_assert!(total_loss(mse, sim, adv, weights) >= 0.0);
    }

    #[test]
    fn mse_is_zero_only_on_equal_inputs(a in images(2, 4), b in images(2, 4)) {
        let (ta, tb) = (Tensor::from_images(&a).unwrap(), Tensor::from_images(&b).unwrap());
        let v = mse_loss(&ta, &tb).unwrap().value;
        prop_assert!(v >= 0.0);
        prop_assert_eq!(v == 0.0, a == b);
        prop_assert_eq!(mse_loss(&ta, &ta).unwrap().value, 0.0);
    }

    #[test]
    fn sigmoid_stays_in_unit_interval(z in -800.0..800.0f64) {
        let s = sigmoid(z);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!((s + sigmoid(-z) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adversarial_loss_is_finite_for_any_probability(p in prop::collection::vec(0.0..=1.0f64, 1..8)) {
        let (value, grads) = adversarial_from_probs(&p);
        prop_assert!(value.is_finite() && value >= 0.0);
        prop_assert!(grads.iter().all(|g| g.is_finite() && *g <= 0.0));
    }

    #[test]
    fn tensor_round_trips_images(batch in images(3, 5)) {
        prop_assert_eq!(Tensor::from_images(&batch).unwrap().to_images().unwrap(), batch);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn generator_output_is_an_image(batch in images(2, 8), seed in any::<u64>(), skip in any::<bool>()) {
        let g = Generator::new(GeneratorConfig { features: 4, blocks: 1, skip_enabled: skip, seed }).unwrap();
        let out = g.forward(&Tensor::from_images(&batch).unwrap()).unwrap();
        prop_assert_eq!(out.shape(), [2, 1, 8, 8]);
        prop_assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
