//! Named experiment presets.

use crate::error::Result;
use crate::kalman::StateSpaceModel;
use crate::scalar::Scalar;
use nalgebra::{DMatrix, DVector};

/// A plant plus the filter's prior and the integer width used to store it.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario<T: Scalar> {
    pub name: String,
    pub model: StateSpaceModel<T>,
    /// Prior mean `x̂_{0|0}`; the true initial state is drawn around it.
    pub x0_mean: DVector<T>,
    /// Prior covariance `P_{0|0}`.
    pub p0: DMatrix<T>,
    /// Integer bits of the fixed-point format.
    pub integer_bits: u32,
}

/// Process noise standard deviation of both presets.
pub const SIGMA_PROCESS: f64 = 0.01;
/// Measurement noise standard deviation of both presets.
pub const SIGMA_MEASUREMENT: f64 = 10.0;
/// Integer bits for both presets: measurements reach roughly ±130 over 250
/// steps of the tracking model, so 8 bits (±255.99) never saturate in practice.
pub const DEFAULT_INTEGER_BITS: u32 = 8;

/// Position/velocity tracking with unit time step and position-only
/// measurements. Prior: `x̂_0 = 0`, `P_0 = Q`.
pub fn tracking2d<T: Scalar>() -> Scenario<T> {
    let q = DMatrix::identity(2, 2) * T::lit(SIGMA_PROCESS * SIGMA_PROCESS);
    let model = StateSpaceModel::new(
        DMatrix::from_row_slice(2, 2, &[T::one(), T::one(), T::zero(), T::one()]),
        DMatrix::from_row_slice(1, 2, &[T::one(), T::zero()]),
        q.clone(),
        DMatrix::from_element(1, 1, T::lit(SIGMA_MEASUREMENT * SIGMA_MEASUREMENT)),
    )
    .expect("tracking preset is a valid model");
    Scenario {
        name: "tracking2d".into(),
        model,
        x0_mean: DVector::zeros(2),
        p0: q,
        integer_bits: DEFAULT_INTEGER_BITS,
    }
}

/// Cyclic shift of a `c`-entry state (`F[i][i-1] = 1`, `F[0][c-1] = 1`),
/// every entry measured (`H = I`). Prior: `x̂_0 = 0`, `P_0 = I`, i.e. the
/// true initial state is standard normal.
pub fn shift<T: Scalar>(c: usize) -> Result<Scenario<T>> {
    let f = shift_matrix::<T>(c);
    let model = StateSpaceModel::new(
        f,
        DMatrix::identity(c, c),
        DMatrix::identity(c, c) * T::lit(SIGMA_PROCESS * SIGMA_PROCESS),
        DMatrix::identity(c, c) * T::lit(SIGMA_MEASUREMENT * SIGMA_MEASUREMENT),
    )?;
    Ok(Scenario {
        name: format!("shift{c}"),
        model,
        x0_mean: DVector::zeros(c),
        p0: DMatrix::identity(c, c),
        integer_bits: DEFAULT_INTEGER_BITS,
    })
}

pub fn shift20<T: Scalar>() -> Scenario<T> {
    shift(20).expect("shift preset is a valid model")
}

/// Permutation moving entry `i-1` to `i` and the last entry to the first.
pub fn shift_matrix<T: Scalar>(c: usize) -> DMatrix<T> {
    DMatrix::from_fn(c, c, |i, j| {
        if (i + c - j) % c == 1 || (c == 1 && i == j) {
            T::one()
        } else {
            T::zero()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shift_matrix_is_a_cyclic_permutation() {
        let f = shift_matrix::<f64>(4);
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(&f * x, DVector::from_vec(vec![4.0, 1.0, 2.0, 3.0]));
    }

    #[test]
    fn presets_have_integer_dynamics() {
        assert!(tracking2d::<f64>().model.has_integer_dynamics());
        assert!(shift20::<f64>().model.has_integer_dynamics());
        assert_eq!(shift20::<f64>().model.state_dim(), 20);
    }
}
