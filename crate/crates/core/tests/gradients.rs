mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use srq::quant::fake_quantize_backward;
use srq::quant::{QuantizerState, Role, SearchMode};
use srq::Tensor;

use common::{kink_free_bounds, minmax, model_gradient_check, pick_bounds, random_images, scalar_bound_check, toy};

const H: f64 = 1e-3;

#[test]
fn bound_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for upper in [false, true] {
        let worst = (0..1000).map(|_| scalar_bound_check(&mut rng, upper, H)).fold(0.0, f64::max);
        assert!(worst < 1e-2, "upper={upper}: worst relative error {worst}");
    }
}

#[test]
fn input_gradient_is_masked_straight_through() {
    let q = QuantizerState::new(2, -1.0, 1.0, Role::Activation, SearchMode::Symmetric).unwrap();
    let v = Tensor::new(vec![5], vec![-2.0, -1.0, 0.3, 1.0, 1.5]).unwrap();
    let g = Tensor::new(vec![5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
    let (gv, _, _) = fake_quantize_backward(&v, &q, &g).unwrap();
    assert_eq!(gv.data(), &[0.0, 2.0, 3.0, 4.0, 0.0]);
}

#[test]
fn model_bound_gradients_match_reference_differences() {
    let w = toy(5);
    let imgs = random_images(2, 16, 9);
    for bits in [2u8, 4] {
        let q = minmax(&w, &imgs, bits);
        let q = kink_free_bounds(&w, &q, &imgs[0], 1e-2);
        let picks = pick_bounds(&q, 24, bits as u64);
        assert!(picks.len() >= 20);
        let checks = model_gradient_check(&w, &q, &imgs[0], &picks, H, true);
        let bad: Vec<String> = checks
            .iter()
            .filter(|c| c.rel_err() >= 1e-2)
            .map(|c| format!("{} {} a={:.4e} n={:.4e}", c.site, if c.upper { "u" } else { "l" }, c.analytic, c.numeric))
            .collect();
        assert!(bad.is_empty(), "{bits}-bit: {}", bad.join("; "));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn clip_only_gradient_outside_range(
        bits in prop::sample::select(vec![2u8, 3, 4, 8]),
        l in -2.0f32..0.0,
        width in 0.1f32..3.0,
        x in -10.0f32..10.0,
    ) {
        let u = l + width;
        prop_assume!(x < l || x > u);
        let q = QuantizerState::new(bits, l, u, Role::Activation, SearchMode::Symmetric).unwrap();
        let v = Tensor::new(vec![1], vec![x]).unwrap();
        let g = Tensor::new(vec![1], vec![1.0]).unwrap();
        let (_, gl, gu) = fake_quantize_backward(&v, &q, &g).unwrap();
        // Clipped values sit on a bound: the output moves one-for-one with it.
        if x > u {
            prop_assert!((gu - 1.0).abs() < 1e-6 && gl.abs() < 1e-6);
        } else {
            prop_assert!((gl - 1.0).abs() < 1e-6 && gu.abs() < 1e-6);
        }
    }
}
