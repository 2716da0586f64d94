//! Full-precision Kalman machinery: the plant model, the offline gain
//! schedule (with its quantized copies) and the ideal filter recursion.

use crate::error::{Error, Result};
use crate::fixedpoint::{quantize_matrix, FixedPointFormat, QuantizedMatrix};
use crate::scalar::Scalar;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Tolerance used when checking symmetry and positive semi-definiteness.
pub const PSD_TOLERANCE: f64 = 1e-10;

/// Linear plant `x_{k+1} = F x_k + u_k`, sensor `y_k = H x_k + v_k`,
/// `u ~ N(0, Q)`, `v ~ N(0, R)`.
#[allow(non_snake_case)]
#[derive(Clone, Debug, PartialEq)]
pub struct StateSpaceModel<T: Scalar> {
    F: DMatrix<T>,
    H: DMatrix<T>,
    Q: DMatrix<T>,
    R: DMatrix<T>,
}

#[allow(non_snake_case)]
impl<T: Scalar> StateSpaceModel<T> {
    pub fn new(F: DMatrix<T>, H: DMatrix<T>, Q: DMatrix<T>, R: DMatrix<T>) -> Result<Self> {
        let c = F.nrows();
        if c == 0 || F.ncols() != c {
            return Err(Error::dims("F", (c, c), F.shape()));
        }
        let d = H.nrows();
        if d == 0 || H.ncols() != c {
            return Err(Error::dims("H", (d, c), H.shape()));
        }
        if Q.shape() != (c, c) {
            return Err(Error::dims("Q", (c, c), Q.shape()));
        }
        if R.shape() != (d, d) {
            return Err(Error::dims("R", (d, d), R.shape()));
        }
        for (name, m) in [("F", &F), ("H", &H), ("Q", &Q), ("R", &R)] {
            if m.iter().any(|v| !v.is_finite_value()) {
                return Err(Error::InvalidModel(format!("{name} has non-finite entries")));
            }
        }
        check_covariance("Q", &Q)?;
        check_covariance("R", &R)?;
        Ok(Self { F, H, Q, R })
    }

    /// State dimension `c`.
    pub fn state_dim(&self) -> usize {
        self.F.nrows()
    }

    /// Measurement dimension `d`.
    pub fn measurement_dim(&self) -> usize {
        self.H.nrows()
    }

    pub fn f(&self) -> &DMatrix<T> {
        &self.F
    }

    pub fn h(&self) -> &DMatrix<T> {
        &self.H
    }

    pub fn q(&self) -> &DMatrix<T> {
        &self.Q
    }

    pub fn r(&self) -> &DMatrix<T> {
        &self.R
    }

    /// F and H contain only integers. The quantized transition then equals
    /// `(I - Q(K) H) F` and the total-error recursion is exact.
    pub fn has_integer_dynamics(&self) -> bool {
        self.F.iter().chain(self.H.iter()).all(|v| v.fract() == T::zero())
    }
}

/// Rejects non-symmetric or indefinite covariance matrices.
pub fn check_covariance<T: Scalar>(name: &str, m: &DMatrix<T>) -> Result<()> {
    let scale = m.amax().max(T::one());
    let tol = T::lit(PSD_TOLERANCE) * scale;
    if (m - m.transpose()).amax() > tol {
        return Err(Error::InvalidModel(format!("{name} is not symmetric")));
    }
    if min_eigenvalue(m) < -tol {
        return Err(Error::InvalidModel(format!("{name} is not positive semi-definite")));
    }
    Ok(())
}

pub fn min_eigenvalue<T: Scalar>(m: &DMatrix<T>) -> T {
    let sym = symmetrized(m);
    sym.symmetric_eigenvalues()
        .iter()
        .fold(T::infinity(), |acc, &v| acc.min(v))
}

/// `(M + M^T) / 2`.
pub fn symmetrized<T: Scalar>(m: &DMatrix<T>) -> DMatrix<T> {
    (m + m.transpose()) * T::lit(0.5)
}

/// Offline quantities for one filter step `k` (1-based in the schedule).
#[derive(Clone, Debug)]
pub struct GainStep<T: Scalar> {
    pub p_prior: DMatrix<T>,
    pub gain: DMatrix<T>,
    pub p_post: DMatrix<T>,
    /// `D_k = (I - K_k H) F`.
    pub transition: DMatrix<T>,
    pub gain_q: QuantizedMatrix<T>,
    pub transition_q: QuantizedMatrix<T>,
}

impl<T: Scalar> GainStep<T> {
    pub fn delta_gain(&self) -> &DMatrix<T> {
        self.gain_q.delta()
    }

    pub fn delta_transition(&self) -> &DMatrix<T> {
        self.transition_q.delta()
    }
}

/// Per-step gains and covariances for steps `1..=N`.
#[derive(Clone, Debug)]
pub struct GainSchedule<T: Scalar> {
    format: FixedPointFormat,
    p0: DMatrix<T>,
    steps: Vec<GainStep<T>>,
}

impl<T: Scalar> GainSchedule<T> {
    pub fn format(&self) -> FixedPointFormat {
        self.format
    }

    pub fn initial_covariance(&self) -> &DMatrix<T> {
        &self.p0
    }

    pub fn steps(&self) -> &[GainStep<T>] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `P_{N|N}` of the ideal filter.
    pub fn final_covariance(&self) -> &DMatrix<T> {
        &self.steps.last().expect("schedule has at least one step").p_post
    }

    /// Steps whose quantized K or D hit the format range.
    pub fn saturated_steps(&self) -> Vec<usize> {
        self.steps
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.gain_q.saturated().is_empty() || !s.transition_q.saturated().is_empty())
            .map(|(k, _)| k + 1)
            .collect()
    }
}

/// Runs the prior-covariance, gain and posterior-covariance recursions for
/// `steps` steps starting from `P_{0|0} = p0`, then quantizes every `K_k` and
/// `D_k` to `fmt`.
pub fn precompute_gains<T: Scalar>(
    model: &StateSpaceModel<T>,
    p0: &DMatrix<T>,
    steps: usize,
    fmt: FixedPointFormat,
) -> Result<GainSchedule<T>> {
    let c = model.state_dim();
    if steps == 0 {
        return Err(Error::InvalidParameter {
            name: "steps",
            reason: "at least one step is required".into(),
        });
    }
    if p0.shape() != (c, c) {
        return Err(Error::dims("P0", (c, c), p0.shape()));
    }
    check_covariance("P0", p0)?;

    let f = model.f();
    let h = model.h();
    let eye = DMatrix::<T>::identity(c, c);
    let mut p = p0.clone();
    let mut out = Vec::with_capacity(steps);
    for k in 1..=steps {
        let p_prior = symmetrized(&(f * &p * f.transpose() + model.q()));
        let s = symmetrized(&(h * &p_prior * h.transpose() + model.r()));
        let s_inv = s
            .cholesky()
            .map(|ch| ch.inverse())
            .ok_or(Error::SingularInnovation { step: k })?;
        let gain = &p_prior * h.transpose() * s_inv;
        let i_kh = &eye - &gain * h;
        let p_post = symmetrized(&(&i_kh * &p_prior));
        let transition = &i_kh * f;
        let gain_q = quantize_matrix(&gain, fmt)?;
        let transition_q = quantize_matrix(&transition, fmt)?;
        p = p_post.clone();
        out.push(GainStep {
            p_prior,
            gain,
            p_post,
            transition,
            gain_q,
            transition_q,
        });
    }
    Ok(GainSchedule {
        format: fmt,
        p0: p0.clone(),
        steps: out,
    })
}

/// Samples `N(0, cov)` through a symmetric square root, so singular (PSD)
/// covariances such as `Q = 0` are fine.
#[derive(Clone, Debug)]
pub struct GaussianNoise<T: Scalar> {
    sqrt: DMatrix<T>,
    zero: bool,
}

impl<T: Scalar> GaussianNoise<T> {
    pub fn new(cov: &DMatrix<T>) -> Self {
        let eig = symmetrized(cov).symmetric_eigen();
        let roots = eig.eigenvalues.map(|l| l.max(T::zero()).sqrt());
        let sqrt = &eig.eigenvectors * DMatrix::from_diagonal(&roots);
        let zero = roots.iter().all(|r| *r == T::zero());
        Self { sqrt, zero }
    }

    pub fn dim(&self) -> usize {
        self.sqrt.nrows()
    }

    /// Adds one draw to `out` in place, using `scratch` for the standard
    /// normals.
    pub fn add_sample<R: Rng + ?Sized>(&self, rng: &mut R, scratch: &mut DVector<T>, out: &mut DVector<T>)
    where
        StandardNormal: Distribution<T>,
    {
        // Draws are consumed even for a zero covariance so that the random
        // stream layout does not depend on Q or R.
        for z in scratch.iter_mut() {
            *z = StandardNormal.sample(rng);
        }
        if !self.zero {
            out.gemv(T::one(), &self.sqrt, scratch, T::one());
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<T>
    where
        StandardNormal: Distribution<T>,
    {
        let mut scratch = DVector::zeros(self.dim());
        let mut out = DVector::zeros(self.dim());
        self.add_sample(rng, &mut scratch, &mut out);
        out
    }
}

/// Ground-truth states `x_1..x_N` and measurements `y_1..y_N`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T: Scalar> {
    pub states: Vec<DVector<T>>,
    pub measurements: Vec<DVector<T>>,
}

/// Simulates `steps` transitions from `x0`.
pub fn simulate_process<T: Scalar, R: Rng + ?Sized>(
    model: &StateSpaceModel<T>,
    x0: &DVector<T>,
    steps: usize,
    rng: &mut R,
) -> Result<Trajectory<T>>
where
    StandardNormal: Distribution<T>,
{
    let c = model.state_dim();
    let d = model.measurement_dim();
    if x0.len() != c {
        return Err(Error::dims("x0", (c, 1), (x0.len(), 1)));
    }
    let process = GaussianNoise::new(model.q());
    let sensor = GaussianNoise::new(model.r());
    let mut zc = DVector::zeros(c);
    let mut zd = DVector::zeros(d);
    let mut x = x0.clone();
    let mut states = Vec::with_capacity(steps);
    let mut measurements = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut next = model.f() * &x;
        process.add_sample(rng, &mut zc, &mut next);
        x = next;
        let mut y = model.h() * &x;
        sensor.add_sample(rng, &mut zd, &mut y);
        states.push(x.clone());
        measurements.push(y);
    }
    Ok(Trajectory { states, measurements })
}

/// One posterior update written as `D x + K y`.
pub fn filter_step_ideal<T: Scalar>(
    x_post: &DVector<T>,
    y: &DVector<T>,
    gain: &DMatrix<T>,
    transition: &DMatrix<T>,
) -> DVector<T> {
    transition * x_post + gain * y
}
