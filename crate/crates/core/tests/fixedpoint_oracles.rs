use nalgebra::DMatrix;
use proptest::prelude::*;
use qkalman::fixedpoint::{fp_matvec, quantization_noise_variance, quantize, quantize_matrix, FixedPointValue};
use qkalman::FixedPointFormat;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn fmt(n: u32, m: u32) -> FixedPointFormat {
    FixedPointFormat::new(n, m).unwrap()
}

#[test]
fn pi_matches_exhaustive_scan() {
    let f = fmt(4, 10);
    let pi = std::f64::consts::PI;
    let mut best = (f64::INFINITY, 0u64);
    for mag in 0..=f.max_raw() {
        let v = mag as f64 / 1024.0;
        let d = (v - pi).abs();
        if d < best.0 {
            best = (d, mag);
        }
    }
    let q = quantize(pi, f);
    assert!(!q.saturated);
    assert_eq!(q.value.magnitude(), best.1);
    assert!(!q.value.is_negative());
    assert!((q.value.to_real::<f64>() - pi).abs() <= 2f64.powi(-11));
}

#[test]
fn small_examples() {
    assert_eq!(quantize(0.3, fmt(4, 2)).value.to_real::<f64>(), 0.25);
    let q = quantize(-1.0, fmt(4, 8));
    assert_eq!(q.value.to_real::<f64>(), -1.0);

    let id = quantize_matrix(&DMatrix::<f64>::identity(3, 3), fmt(1, 5)).unwrap();
    assert!(id.delta().iter().all(|&d| d == 0.0));

    let tenth = quantize_matrix(&DMatrix::from_element(2, 2, 0.1f64), fmt(4, 4)).unwrap();
    // 0.1 * 16 = 1.6 rounds to 2, i.e. 0.125.
    for &d in tenth.delta().iter() {
        assert_eq!(d, 0.125 - 0.1);
        assert!(d.abs() <= 2f64.powi(-5));
    }

    let big = quantize_matrix(&DMatrix::from_row_slice(1, 2, &[16.0f64, 1.0]), fmt(4, 4)).unwrap();
    assert_eq!(big.saturated(), &[(0, 0)]);

    assert_eq!(quantization_noise_variance::<f64>(fmt(3, 0)), 1.0 / 12.0);
    assert!((quantization_noise_variance::<f64>(fmt(3, 4)) - 3.2552083333e-4).abs() < 1e-12);
    assert_eq!(quantization_noise_variance::<f64>(fmt(3, 10)), 2f64.powi(-20) / 12.0);
}

/// Exact rational `num / 2^shift` for a signed raw fixed-point product sum.
fn exact_dot(row: &[FixedPointValue], x: &[FixedPointValue]) -> (i128, u32) {
    let m = row[0].format().m();
    let num = row.iter().zip(x).map(|(a, b)| a.signed_raw() * b.signed_raw()).sum();
    (num, 2 * m)
}

#[test]
fn quarter_times_quarter_rounds_to_zero() {
    let f = fmt(2, 2);
    let a = quantize_matrix(&DMatrix::from_element(1, 1, 0.25f64), f).unwrap();
    let x = [quantize(0.25, f).value];
    let y = fp_matvec(&a, &x).unwrap();
    assert_eq!(y.values[0].magnitude(), 0);
    // Exact product 1/16 as a rational; the rounding error is -1/16.
    let (num, shift) = exact_dot(&[a.get(0, 0)], &x);
    assert_eq!((num, shift), (1, 4));
    let err = y.values[0].to_real::<f64>() - num as f64 / (1u64 << shift) as f64;
    assert_eq!(err, -0.0625);
}

#[test]
fn identity_matvec_is_exact() {
    let f = fmt(6, 9);
    let id = quantize_matrix(&DMatrix::<f64>::identity(4, 4), f).unwrap();
    let x: Vec<_> = [1.5, -3.25, 0.001953125, -17.0]
        .iter()
        .map(|&v| quantize(v, f).value)
        .collect();
    assert_eq!(fp_matvec(&id, &x).unwrap().values, x);
}

#[test]
fn matvec_error_bound_over_random_instances() {
    let f = fmt(6, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let half = 2f64.powi(-13);
    for _ in 0..1000 {
        let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-2.0..2.0));
        let x: Vec<_> = (0..3).map(|_| quantize(rng.random_range(-4.0..4.0), f).value).collect();
        let qa = quantize_matrix(&a, f).unwrap();
        let y = fp_matvec(&qa, &x).unwrap();
        assert!(y.saturated.iter().all(|s| !s));
        for i in 0..3 {
            let row: Vec<_> = (0..3).map(|j| qa.get(i, j)).collect();
            let (num, shift) = exact_dot(&row, &x);
            let exact = num as f64 / (1u64 << shift) as f64;
            assert!((y.values[i].to_real::<f64>() - exact).abs() <= 3.0 * half);
        }
    }
}

#[test]
fn rounding_noise_variance_matches_uniform_model() {
    for m in [4u32, 8, 12] {
        let f = fmt(20, m);
        let step = 2f64.powi(-(m as i32));
        let dist = Normal::new(0.0, 100.0 * step).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(m as u64);
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let x: f64 = dist.sample(&mut rng);
            let e = quantize(x, f).value.to_real::<f64>() - x;
            s += e;
            s2 += e * e;
        }
        let var = s2 / n as f64 - (s / n as f64).powi(2);
        let target = quantization_noise_variance::<f64>(f);
        assert!((var / target - 1.0).abs() < 0.05, "m={m}: {var} vs {target}");
    }
}

proptest! {
    #[test]
    fn representable_values_round_trip(n in 0u32..10, m in 0u32..20, mag in any::<u64>(), neg in any::<bool>()) {
        prop_assume!(n + m >= 1);
        let f = fmt(n, m);
        let v = FixedPointValue::from_parts(neg, mag & f.max_raw(), f).unwrap();
        let back = quantize(v.to_real::<f64>(), f);
        prop_assert!(!back.saturated);
        prop_assert_eq!(back.value.magnitude(), v.magnitude());
        if v.magnitude() != 0 {
            prop_assert_eq!(back.value.is_negative(), v.is_negative());
        }
    }

    #[test]
    fn in_range_error_is_at_most_half_step(n in 1u32..10, m in 0u32..20, x in -1e3f64..1e3) {
        let f = fmt(n, m);
        let q = quantize(x, f);
        if !q.saturated {
            prop_assert!((q.value.to_real::<f64>() - x).abs() <= 2f64.powi(-(m as i32) - 1));
        } else {
            prop_assert!(x.abs() > f.max_value::<f64>());
        }
    }
}
