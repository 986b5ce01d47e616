use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srq::quant::{fake_quantize, int_linear, PackedIntTensor, QuantGrid, QuantizerState, Role, SearchMode};
use srq::Tensor;

fn state(bits: u8, l: f32, u: f32) -> QuantizerState {
    QuantizerState::new(bits, l, u, Role::Activation, SearchMode::Symmetric).unwrap()
}

fn fq(q: &QuantizerState, v: &[f32]) -> Vec<f32> {
    fake_quantize(&Tensor::new(vec![v.len()], v.to_vec()).unwrap(), q).unwrap().data().to_vec()
}

fn bits() -> impl Strategy<Value = u8> {
    prop::sample::select(vec![2u8, 3, 4, 8])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn idempotent(b in bits(), l in -5.0f32..5.0, w in 1e-3f32..10.0, v in prop::collection::vec(-20.0f32..20.0, 1..64)) {
        let q = state(b, l, l + w);
        let once = fq(&q, &v);
        prop_assert_eq!(fq(&q, &once), once);
    }

    #[test]
    fn grid_points_are_fixed(b in bits(), l in -5.0f32..5.0, w in 1e-3f32..10.0) {
        let u = l + w;
        let q = state(b, l, u);
        let n = (1u32 << b) - 1;
        let step = (u - l) / n as f32;
        let grid: Vec<f32> = (0..=n).map(|k| if k == n { u } else { l + k as f32 * step }).collect();
        prop_assert_eq!(fq(&q, &grid), grid);
    }

    #[test]
    fn range_and_level_count(b in bits(), l in -5.0f32..5.0, w in 1e-3f32..10.0, v in prop::collection::vec(-20.0f32..20.0, 1..256)) {
        let u = l + w;
        let out = fq(&state(b, l, u), &v);
        prop_assert!(out.iter().all(|&x| l <= x && x <= u));
        let mut distinct = out.clone();
        distinct.sort_by(f32::total_cmp);
        distinct.dedup();
        prop_assert!(distinct.len() <= 1usize << b);
    }

    #[test]
    fn monotone(b in bits(), l in -5.0f32..5.0, w in 1e-3f32..10.0, mut v in prop::collection::vec(-20.0f32..20.0, 2..64)) {
        v.sort_by(f32::total_cmp);
        let out = fq(&state(b, l, l + w), &v);
        prop_assert!(out.windows(2).all(|p| p[0] <= p[1]));
    }

    #[test]
    fn pack_round_trip(b in bits(), codes in prop::collection::vec(0u32..256, 0..100)) {
        let max = (1u32 << b) - 1;
        let codes: Vec<u32> = codes.into_iter().map(|c| c & max).collect();
        let p = PackedIntTensor::pack(&codes, &[codes.len()], b, -1.0, 1.0).unwrap();
        prop_assert_eq!(p.payload().len(), (codes.len() * b as usize).div_ceil(8));
        let back: Vec<u32> = p.unpack().into_iter().map(u32::from).collect();
        prop_assert_eq!(back, codes);
    }
}

#[test]
fn out_of_range_code_is_rejected() {
    assert!(PackedIntTensor::pack(&[4], &[1], 2, 0.0, 1.0).is_err());
}

#[test]
fn packing_uses_little_endian_bit_order() {
    // codes 1, 2, 3 at 2 bits: bits 0b11_10_01 in the first byte
    let p = PackedIntTensor::pack(&[1, 2, 3], &[3], 2, 0.0, 1.0).unwrap();
    assert_eq!(p.payload(), &[0b0011_1001]);
    let p = PackedIntTensor::pack(&[5, 7, 1], &[3], 3, 0.0, 1.0).unwrap();
    assert_eq!(p.payload(), &[0b0111_1101, 0]);
}

/// Fake-quantize both operands, then an f64 matmul.
fn reference_linear(x: &Tensor, xg: &QuantGrid, w: &Tensor, wg: &QuantGrid, bias: &[f32]) -> Vec<f64> {
    let (rows, k, n) = (x.shape()[0], x.shape()[1], w.shape()[0]);
    let xq: Vec<f64> = x.data().iter().map(|&v| xg.quantize(v) as f64).collect();
    let wq: Vec<f64> = w.data().iter().map(|&v| wg.quantize(v) as f64).collect();
    let mut out = vec![0.0; rows * n];
    for r in 0..rows {
        for o in 0..n {
            out[r * n + o] = bias[o] as f64 + (0..k).map(|i| xq[r * k + i] * wq[o * k + i]).sum::<f64>();
        }
    }
    out
}

#[test]
fn int_linear_matches_fake_quant_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for bits in [2u8, 3, 4, 8] {
        for _ in 0..20 {
            let (rows, k, n) = (rng.random_range(1..9), rng.random_range(1..40), rng.random_range(1..9));
            let x = Tensor::from_fn(&[rows, k], |_| rng.random_range(-2.0..2.0));
            let w = Tensor::from_fn(&[n, k], |_| rng.random_range(-0.5..0.5));
            let bias: Vec<f32> = (0..n).map(|_| rng.random_range(-0.1..0.1)).collect();
            let xg = QuantGrid::new(-1.5, 1.8, bits).unwrap();
            let wg = QuantGrid::new(-0.4, 0.45, bits).unwrap();
            let px = PackedIntTensor::quantize(&x, &xg).unwrap();
            let pw = PackedIntTensor::quantize(&w, &wg).unwrap();
            let got = int_linear(&px, &pw, Some(&bias)).unwrap();
            let want = reference_linear(&x, &xg, &w, &wg, &bias);
            for (a, b) in got.data().iter().zip(&want) {
                assert!((*a as f64 - b).abs() < 1e-4, "{bits}-bit: {a} vs {b}");
            }
        }
    }
}
