//! Analytic covariance of the total estimation error of the fixed-point
//! filter running on unreliable memory.
//!
//! With `K' = K + δK` and `D' = D + δD` the quantized gain and transition,
//! one step maps the total-error covariance as
//!
//! ```text
//! P*' = D' P* D'^T + K' R K'^T + (K'H - I) Q (K'H - I)^T
//!     + D Cov[εx] D^T + K Cov[εy] K^T + Σx + Γ
//! ```
//!
//! where `Cov[εx] = I 2^-2m/12`, `Cov[εy] = I 2^-2m/12`,
//! `Σx = I (c + d) 2^-2m/12` (one rounding per scalar product) and
//! `Γ = I σγ²`. The map is exact when F and H are integer valued and an
//! approximation otherwise; results carry an `approximate` tag in that case.

use crate::error::{Error, Result};
use crate::fixedpoint::{quantization_noise_variance, FixedPointFormat};
use crate::kalman::{precompute_gains, symmetrized, GainSchedule, GainStep, StateSpaceModel};
use crate::memory_model::{memory_noise_variance, EnergyVector, MemoryNoiseParams};
use crate::scalar::Scalar;
use nalgebra::DMatrix;

/// Noise sources entering one step of the recursion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseBudget<T: Scalar> {
    format: FixedPointFormat,
    quantized: bool,
    sigma_gamma2: T,
}

impl<T: Scalar> NoiseBudget<T> {
    pub fn new(ev: &EnergyVector<T>, params: &MemoryNoiseParams<T>) -> Self {
        Self {
            format: ev.format(),
            quantized: true,
            sigma_gamma2: memory_noise_variance(ev, params),
        }
    }

    /// Quantization to `format` plus a memory noise of variance `sigma_gamma2`.
    pub fn with_memory_variance(format: FixedPointFormat, sigma_gamma2: T) -> Self {
        Self {
            format,
            quantized: true,
            sigma_gamma2,
        }
    }

    /// No quantization at all (δK = δD = 0, no rounding noise); only the
    /// memory term remains.
    pub fn full_precision(format: FixedPointFormat, sigma_gamma2: T) -> Self {
        Self {
            format,
            quantized: false,
            sigma_gamma2,
        }
    }

    pub fn format(&self) -> FixedPointFormat {
        self.format
    }

    pub fn is_quantized(&self) -> bool {
        self.quantized
    }

    pub fn sigma_gamma2(&self) -> T {
        self.sigma_gamma2
    }

    /// Per-value rounding variance, zero when quantization is disabled.
    pub fn rounding_variance(&self) -> T {
        if self.quantized {
            quantization_noise_variance(self.format)
        } else {
            T::zero()
        }
    }

    /// `Cov[εx] = I_c 2^-2m/12`.
    pub fn cov_state_rounding(&self, c: usize) -> DMatrix<T> {
        DMatrix::identity(c, c) * self.rounding_variance()
    }

    /// `Cov[εy] = I_d 2^-2m/12`.
    pub fn cov_measurement_rounding(&self, d: usize) -> DMatrix<T> {
        DMatrix::identity(d, d) * self.rounding_variance()
    }

    /// `Σx = I_c (c + d) 2^-2m/12`.
    pub fn cov_product_rounding(&self, c: usize, d: usize) -> DMatrix<T> {
        DMatrix::identity(c, c) * (T::from_usize_lossy(c + d) * self.rounding_variance())
    }

    /// `Γ = I_c σγ²`.
    pub fn gamma(&self, c: usize) -> DMatrix<T> {
        DMatrix::identity(c, c) * self.sigma_gamma2
    }
}

/// `P*_{k|k} = Cov[x̃_{k|k} - x_k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorCovariance<T: Scalar> {
    pub p_star: DMatrix<T>,
    pub step: usize,
    /// F or H had non-integer entries, so the recursion is approximate.
    pub approximate: bool,
}

impl<T: Scalar> ErrorCovariance<T> {
    pub fn initial(p_star: DMatrix<T>) -> Self {
        Self {
            p_star,
            step: 0,
            approximate: false,
        }
    }

    pub fn trace(&self) -> T {
        self.p_star.trace()
    }
}

/// One step of the total-error recursion with explicit gain, transition and
/// their quantization residuals.
#[allow(clippy::too_many_arguments)]
pub fn propagate_error_covariance<T: Scalar>(
    prev: &ErrorCovariance<T>,
    gain: &DMatrix<T>,
    delta_gain: &DMatrix<T>,
    transition: &DMatrix<T>,
    delta_transition: &DMatrix<T>,
    model: &StateSpaceModel<T>,
    budget: &NoiseBudget<T>,
) -> Result<ErrorCovariance<T>> {
    let c = model.state_dim();
    let d = model.measurement_dim();
    let checks = [
        ("P*", prev.p_star.shape(), (c, c)),
        ("K", gain.shape(), (c, d)),
        ("delta K", delta_gain.shape(), (c, d)),
        ("D", transition.shape(), (c, c)),
        ("delta D", delta_transition.shape(), (c, c)),
    ];
    for (name, actual, expected) in checks {
        if actual != expected {
            return Err(Error::dims(name, expected, actual));
        }
    }

    let (gain_eff, transition_eff) = if budget.is_quantized() {
        (gain + delta_gain, transition + delta_transition)
    } else {
        (gain.clone(), transition.clone())
    };
    let eye = DMatrix::<T>::identity(c, c);
    let kh_i = &gain_eff * model.h() - &eye;

    let mut next = &transition_eff * &prev.p_star * transition_eff.transpose();
    next += &gain_eff * model.r() * gain_eff.transpose();
    next += &kh_i * model.q() * kh_i.transpose();
    let rv = budget.rounding_variance();
    if rv > T::zero() {
        next += (transition * transition.transpose()) * rv;
        next += (gain * gain.transpose()) * rv;
        next += budget.cov_product_rounding(c, d);
    }
    next += budget.gamma(c);

    Ok(ErrorCovariance {
        p_star: symmetrized(&next),
        step: prev.step + 1,
        approximate: prev.approximate || !model.has_integer_dynamics(),
    })
}

/// [`propagate_error_covariance`] with the matrices of a schedule step.
pub fn propagate_step<T: Scalar>(
    prev: &ErrorCovariance<T>,
    step: &GainStep<T>,
    model: &StateSpaceModel<T>,
    budget: &NoiseBudget<T>,
) -> Result<ErrorCovariance<T>> {
    propagate_error_covariance(
        prev,
        &step.gain,
        step.delta_gain(),
        &step.transition,
        step.delta_transition(),
        model,
        budget,
    )
}

/// Default starting point `P*_0 = P_0 + Γ`: the initial estimate is itself
/// read from unreliable memory.
pub fn initial_error_covariance<T: Scalar>(p0: &DMatrix<T>, budget: &NoiseBudget<T>) -> ErrorCovariance<T> {
    ErrorCovariance::initial(p0 + budget.gamma(p0.nrows()))
}

/// `P*_{k|k}` for every `k = 0..=N` along a precomputed schedule.
pub fn error_trajectory<T: Scalar>(
    model: &StateSpaceModel<T>,
    schedule: &GainSchedule<T>,
    budget: &NoiseBudget<T>,
    start: ErrorCovariance<T>,
) -> Result<Vec<ErrorCovariance<T>>> {
    let mut out = Vec::with_capacity(schedule.len() + 1);
    out.push(start);
    for step in schedule.steps() {
        let next = propagate_step(out.last().unwrap(), step, model, budget)?;
        out.push(next);
    }
    Ok(out)
}

/// `P*_{N|N}` for format `fmt` and bank energies `ev`.
pub fn theoretical_error_at<T: Scalar>(
    model: &StateSpaceModel<T>,
    ev: &EnergyVector<T>,
    params: &MemoryNoiseParams<T>,
    steps: usize,
    p0: &DMatrix<T>,
) -> Result<ErrorCovariance<T>> {
    let schedule = precompute_gains(model, p0, steps, ev.format())?;
    let budget = NoiseBudget::new(ev, params);
    theoretical_error_on(model, &schedule, &budget)
}

/// `P*_{N|N}` for an existing schedule, starting from `P_0 + Γ`.
pub fn theoretical_error_on<T: Scalar>(
    model: &StateSpaceModel<T>,
    schedule: &GainSchedule<T>,
    budget: &NoiseBudget<T>,
) -> Result<ErrorCovariance<T>> {
    let mut cur = initial_error_covariance(schedule.initial_covariance(), budget);
    for step in schedule.steps() {
        cur = propagate_step(&cur, step, model, budget)?;
    }
    Ok(cur)
}

/// `P*_{N|N}` as an affine function of the memory noise variance:
/// `P*(σγ²) = base + σγ² slope`.
///
/// Γ enters every step additively and the starting point linearly, so the
/// map is exactly affine; the energy optimizers evaluate constraints through
/// this instead of re-running the recursion.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorResponse<T: Scalar> {
    pub base: DMatrix<T>,
    pub slope: DMatrix<T>,
    pub approximate: bool,
}

impl<T: Scalar> ErrorResponse<T> {
    pub fn new(model: &StateSpaceModel<T>, schedule: &GainSchedule<T>) -> Result<Self> {
        let fmt = schedule.format();
        let base = theoretical_error_on(model, schedule, &NoiseBudget::with_memory_variance(fmt, T::zero()))?;
        // The slope obeys the homogeneous recursion S' = D' S D'^T + I, S_0 = I.
        let c = model.state_dim();
        let eye = DMatrix::<T>::identity(c, c);
        let mut slope = eye.clone();
        for step in schedule.steps() {
            let t = &step.transition + step.delta_transition();
            slope = symmetrized(&(&t * &slope * t.transpose() + &eye));
        }
        Ok(Self {
            base: base.p_star,
            slope,
            approximate: base.approximate,
        })
    }

    pub fn at(&self, sigma_gamma2: T) -> DMatrix<T> {
        &self.base + &self.slope * sigma_gamma2
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kalman::precompute_gains;

    fn tracking() -> StateSpaceModel<f64> {
        StateSpaceModel::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            DMatrix::identity(2, 2) * 1e-4,
            DMatrix::from_element(1, 1, 100.0),
        )
        .unwrap()
    }

    #[test]
    fn budget_matrices() {
        let fmt = FixedPointFormat::new(8, 4).unwrap();
        let b = NoiseBudget::with_memory_variance(fmt, 0.5f64);
        let v = 2f64.powi(-8) / 12.0;
        assert_eq!(b.cov_state_rounding(2), DMatrix::identity(2, 2) * v);
        assert_eq!(b.cov_measurement_rounding(1), DMatrix::identity(1, 1) * v);
        assert_eq!(b.cov_product_rounding(2, 1), DMatrix::identity(2, 2) * (3.0 * v));
        assert_eq!(b.gamma(3), DMatrix::identity(3, 3) * 0.5);
        assert_eq!(NoiseBudget::full_precision(fmt, 0.0f64).rounding_variance(), 0.0);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let model = tracking();
        let prev = ErrorCovariance::initial(DMatrix::<f64>::identity(3, 3));
        let z = DMatrix::zeros(2, 1);
        let zz = DMatrix::zeros(2, 2);
        let b = NoiseBudget::with_memory_variance(FixedPointFormat::new(8, 8).unwrap(), 0.0);
        assert!(propagate_error_covariance(&prev, &z, &z, &zz, &zz, &model, &b).is_err());
    }

    #[test]
    fn single_step_matches_hand_unrolled_sum() {
        let model = tracking();
        let fmt = FixedPointFormat::new(8, 6).unwrap();
        let p0 = model.q().clone();
        let s = precompute_gains(&model, &p0, 1, fmt).unwrap();
        let sigma2 = 0.01;
        let budget = NoiseBudget::with_memory_variance(fmt, sigma2);
        let got = theoretical_error_on(&model, &s, &budget).unwrap().p_star;

        let st = &s.steps()[0];
        let k = &st.gain;
        let dq = st.transition_q.dequantized();
        let kq = st.gain_q.dequantized();
        let eye = DMatrix::<f64>::identity(2, 2);
        let v = 2f64.powi(-12) / 12.0;
        let p_start = &p0 + &eye * sigma2;
        let a = &kq * model.h() - &eye;
        let want = &dq * &p_start * dq.transpose()
            + &kq * model.r() * kq.transpose()
            + &a * model.q() * a.transpose()
            + &st.transition * st.transition.transpose() * v
            + k * k.transpose() * v
            + &eye * (3.0 * v)
            + &eye * sigma2;
        assert!((got - want).amax() < 1e-12);
    }

    #[test]
    fn response_is_affine_in_memory_variance() {
        let model = tracking();
        let fmt = FixedPointFormat::new(8, 10).unwrap();
        let s = precompute_gains(&model, model.q(), 60, fmt).unwrap();
        let resp = ErrorResponse::new(&model, &s).unwrap();
        for sigma2 in [0.0, 1e-4, 0.3] {
            let direct = theoretical_error_on(&model, &s, &NoiseBudget::with_memory_variance(fmt, sigma2))
                .unwrap()
                .p_star;
            let rel = (resp.at(sigma2) - &direct).amax() / direct.amax();
            assert!(rel < 1e-12, "sigma2={sigma2} rel={rel}");
        }
    }

    #[test]
    fn non_integer_dynamics_are_tagged() {
        let model = StateSpaceModel::new(
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 0.1),
            DMatrix::from_element(1, 1, 1.0),
        )
        .unwrap();
        let fmt = FixedPointFormat::new(2, 10).unwrap();
        let ev = EnergyVector::reliable(fmt);
        let params = MemoryNoiseParams::new(12.8, 0.1).unwrap();
        let r = theoretical_error_at(&model, &ev, &params, 5, &DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert!(r.approximate);
        assert_eq!(r.step, 5);
        let r = theoretical_error_at(&tracking(), &EnergyVector::reliable(fmt), &params, 5, tracking().q()).unwrap();
        assert!(!r.approximate);
    }
}
