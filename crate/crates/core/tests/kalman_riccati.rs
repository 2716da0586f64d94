use nalgebra::{DMatrix, DVector};
use qkalman::kalman::{filter_step_ideal, precompute_gains, simulate_process, GaussianNoise, StateSpaceModel};
use qkalman::scenario::{shift_matrix, tracking2d};
use qkalman::FixedPointFormat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fmt() -> FixedPointFormat {
    FixedPointFormat::new(8, 16).unwrap()
}

fn scalar(f: f64, h: f64, q: f64, r: f64) -> StateSpaceModel<f64> {
    StateSpaceModel::new(
        DMatrix::from_element(1, 1, f),
        DMatrix::from_element(1, 1, h),
        DMatrix::from_element(1, 1, q),
        DMatrix::from_element(1, 1, r),
    )
    .unwrap()
}

/// Positive root of the scalar steady-state equation
/// `P = Pp R / (Pp + R)` with `Pp = f² P + q`, `h = 1`.
fn scalar_riccati_root(f: f64, q: f64, r: f64) -> f64 {
    // f² P² + (q + r - f² r) P - q r = 0
    let a = f * f;
    let b = q + r - f * f * r;
    let c = -q * r;
    (-b + (b * b - 4.0 * a * c).sqrt()) / (2.0 * a)
}

#[test]
fn scalar_steady_state_matches_closed_form() {
    for (q, expected) in [(0.0, 0.0), (1.0, 0.531_128_874_149_275)] {
        let model = scalar(0.5, 1.0, q, 1.0);
        let root = scalar_riccati_root(0.5, q, 1.0);
        assert!((root - expected).abs() < 1e-12);
        let s = precompute_gains(&model, &DMatrix::from_element(1, 1, 1.0), 200, fmt()).unwrap();
        assert!((s.final_covariance()[(0, 0)] - root).abs() < 1e-12);
    }
}

#[test]
fn tracking_covariance_converges_by_250() {
    let sc = tracking2d::<f64>();
    let s = precompute_gains(&sc.model, &sc.p0, 250, fmt()).unwrap();
    let steps = s.steps();
    let d = (&steps[249].p_post - &steps[248].p_post).abs().max();
    assert!(d < 1e-9, "last step still moves by {d:e}");
}

#[test]
fn tracking_covariance_settles() {
    let sc = tracking2d::<f64>();
    let s = precompute_gains(&sc.model, &sc.p0, 600, fmt()).unwrap();
    let steps = s.steps();
    assert!((&steps[599].p_post - &steps[598].p_post).abs().max() < 1e-9);
    let p = &steps[249].p_post;
    assert!((p[(0, 0)] - 4.374715).abs() < 1e-5);
    assert!((p[(1, 1)] - 0.0044734).abs() < 1e-6);
    let p = &steps[599].p_post;
    assert!((p[(0, 0)] - 4.374857).abs() < 1e-5);
    for st in steps {
        assert!(st.p_post.clone().symmetric_eigen().eigenvalues.min() >= -1e-10);
        assert_eq!(st.p_post, st.p_post.transpose());
    }
}

#[test]
fn sampled_process_noise_covariance() {
    let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 0.5]);
    let g = GaussianNoise::new(&q);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 100_000;
    let mut acc = DMatrix::zeros(2, 2);
    for _ in 0..n {
        let u = g.sample(&mut rng);
        acc += &u * u.transpose();
    }
    acc /= n as f64;
    for i in 0..2 {
        assert!((acc[(i, i)] / q[(i, i)] - 1.0).abs() < 0.05);
    }
    assert!((acc[(0, 1)] / q[(0, 1)] - 1.0).abs() < 0.05);
}

#[test]
fn shift_model_without_noise_rotates_state() {
    let c = 5;
    let model = StateSpaceModel::new(
        shift_matrix::<f64>(c),
        DMatrix::identity(c, c),
        DMatrix::zeros(c, c),
        DMatrix::identity(c, c),
    )
    .unwrap();
    let x0 = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = simulate_process(&model, &x0, 7, &mut rng).unwrap();
    for (k, x) in t.states.iter().enumerate() {
        for i in 0..c {
            assert_eq!(x[(i + k + 1) % c], x0[i]);
        }
    }
}

#[test]
fn update_form_equals_innovation_form() {
    let sc = tracking2d::<f64>();
    let s = precompute_gains(&sc.model, &sc.p0, 20, fmt()).unwrap();
    let x = DVector::from_vec(vec![3.0, -0.25]);
    let y = DVector::from_vec(vec![7.5]);
    for st in s.steps() {
        let a = filter_step_ideal(&x, &y, &st.gain, &st.transition);
        let prior = sc.model.f() * &x;
        let b = &prior + &st.gain * (&y - sc.model.h() * &prior);
        assert!((a - b).abs().max() < 1e-12);
    }
}

#[test]
fn ideal_filter_error_matches_riccati() {
    let sc = tracking2d::<f64>();
    let n = 250;
    let s = precompute_gains(&sc.model, &sc.p0, n, fmt()).unwrap();
    let prior = GaussianNoise::new(&sc.p0);
    let trials = 10_000;
    let mut acc = DMatrix::zeros(2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..trials {
        let x0 = &sc.x0_mean + prior.sample(&mut rng);
        let traj = simulate_process(&sc.model, &x0, n, &mut rng).unwrap();
        let mut xh = sc.x0_mean.clone();
        for (st, y) in s.steps().iter().zip(&traj.measurements) {
            xh = filter_step_ideal(&xh, y, &st.gain, &st.transition);
        }
        let e = xh - traj.states.last().unwrap();
        acc += &e * e.transpose();
    }
    acc /= trials as f64;
    let p = s.final_covariance();
    for i in 0..2 {
        let rel = (acc[(i, i)] / p[(i, i)] - 1.0).abs();
        assert!(rel < 0.03, "entry {i}: {} vs {}", acc[(i, i)], p[(i, i)]);
    }
}
