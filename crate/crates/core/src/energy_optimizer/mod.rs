//! Minimum-energy bank allocation under an accuracy constraint on `P*_{N|N}`.
//!
//! `P*_{N|N}` depends on the bank energies only through the scalar memory
//! noise variance `σγ² = Σ_b 4^b exp(-a e_b)`, and it does so affinely (see
//! [`ErrorResponse`]). A constraint on `P*` is therefore a ceiling on `σγ²`,
//! and every problem here reduces to
//!
//! ```text
//! minimize Σ e_b   subject to   Σ_b 4^b exp(-a e_b) <= s,   e_b >= e_thres
//! ```
//!
//! (or its grouped variant), a convex problem solved by water-filling.

mod bitwise;
mod levels;

pub use bitwise::{
    optimize_bits_and_energy, uniform_allocation_baseline, uniform_on, waterfill_bitwise, waterfill_on, BitSearch,
    BitwiseSolution, Termination,
};
pub use levels::{compositions, optimal_level_energies, optimize_levels, optimize_levels_on, LevelSolution};

use crate::error::{Error, Result};
use crate::error_theory::ErrorResponse;
use crate::fixedpoint::FixedPointFormat;
use crate::kalman::{precompute_gains, StateSpaceModel};
use crate::memory_model::{bit_flip_probability, EnergyVector, MemoryNoiseParams};
use crate::scalar::{pow4, Scalar};
use nalgebra::DMatrix;

/// Which entry of `P*_{N|N}` a bound applies to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConstraintEntry {
    Element(usize, usize),
    Trace,
}

impl std::fmt::Display for ConstraintEntry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConstraintEntry::Element(i, j) => write!(f, "P*[{i},{j}]"),
            ConstraintEntry::Trace => write!(f, "trace(P*)"),
        }
    }
}

/// One constrained quantity evaluated on a covariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Binding<T: Scalar> {
    pub entry: ConstraintEntry,
    pub value: T,
    pub bound: T,
}

/// Bound on the final error covariance: either entry-wise `P* <= V` or a
/// ceiling on its trace.
///
/// Entries of `V` set to `+inf` are unconstrained.
#[derive(Clone, Debug, PartialEq)]
pub enum PerformanceConstraint<T: Scalar> {
    ComponentWise(DMatrix<T>),
    Trace(T),
}

impl<T: Scalar> PerformanceConstraint<T> {
    pub fn component_wise(v: DMatrix<T>) -> Result<Self> {
        if !v.is_square() {
            return Err(Error::dims("V", (v.nrows(), v.nrows()), v.shape()));
        }
        if v.iter().any(|x| x.is_nan_value()) {
            return Err(Error::NonFinite("V"));
        }
        if let Some(d) = v.diagonal().iter().find(|d| !(**d > T::zero())) {
            return Err(Error::InvalidParameter {
                name: "V",
                reason: format!("diagonal bounds must be positive, got {d}"),
            });
        }
        Ok(PerformanceConstraint::ComponentWise(v))
    }

    /// Variance ceilings on the diagonal only.
    pub fn diagonal(bounds: &[T]) -> Result<Self> {
        let c = bounds.len();
        let v = DMatrix::from_fn(c, c, |i, j| if i == j { bounds[i] } else { T::infinity() });
        Self::component_wise(v)
    }

    /// Ceiling on `P*[0,0]` only (the position variance of the tracking model).
    pub fn position(c: usize, bound: T) -> Result<Self> {
        let mut bounds = vec![T::infinity(); c];
        if c == 0 {
            return Err(Error::InvalidParameter {
                name: "V",
                reason: "empty state".into(),
            });
        }
        bounds[0] = bound;
        Self::diagonal(&bounds)
    }

    pub fn trace(bound: T) -> Result<Self> {
        if !(bound > T::zero()) {
            return Err(Error::InvalidParameter {
                name: "trace_bound",
                reason: format!("must be positive, got {bound}"),
            });
        }
        Ok(PerformanceConstraint::Trace(bound))
    }

    /// State dimension the constraint was built for, if it fixes one.
    pub fn dim(&self) -> Option<usize> {
        match self {
            PerformanceConstraint::ComponentWise(v) => Some(v.nrows()),
            PerformanceConstraint::Trace(_) => None,
        }
    }

    fn check_dim(&self, c: usize) -> Result<()> {
        match self.dim() {
            Some(d) if d != c => Err(Error::dims("V", (c, c), (d, d))),
            _ => Ok(()),
        }
    }

    /// Every constrained quantity of `p` with its bound.
    pub fn evaluate(&self, p: &DMatrix<T>) -> Vec<Binding<T>> {
        match self {
            PerformanceConstraint::ComponentWise(v) => {
                let mut out = Vec::new();
                for i in 0..v.nrows() {
                    for j in 0..v.ncols() {
                        if v[(i, j)].is_finite_value() {
                            out.push(Binding {
                                entry: ConstraintEntry::Element(i, j),
                                value: p[(i, j)],
                                bound: v[(i, j)],
                            });
                        }
                    }
                }
                out
            }
            PerformanceConstraint::Trace(b) => vec![Binding {
                entry: ConstraintEntry::Trace,
                value: p.trace(),
                bound: *b,
            }],
        }
    }

    pub fn is_satisfied(&self, p: &DMatrix<T>) -> bool {
        self.evaluate(p).iter().all(|b| b.value <= b.bound)
    }

    /// The constrained quantity closest to (or furthest past) its bound,
    /// measured relative to the bound.
    pub fn binding_entry(&self, p: &DMatrix<T>) -> Option<Binding<T>> {
        self.evaluate(p).into_iter().fold(None, |best: Option<Binding<T>>, b| {
            let r = (b.value - b.bound) / b.bound.abs();
            match best {
                Some(x) if (x.value - x.bound) / x.bound.abs() >= r => Some(x),
                _ => Some(b),
            }
        })
    }

    /// Range of memory noise variances `σγ² >= 0` for which
    /// `response.at(σγ²)` meets the constraint, or `None` if there is none.
    /// The upper end may be infinite.
    pub fn noise_interval(&self, response: &ErrorResponse<T>) -> Option<(T, T)> {
        let mut lo = T::zero();
        let mut hi = T::infinity();
        let mut limit = |base: T, slope: T, bound: T| {
            if slope > T::zero() {
                hi = hi.min((bound - base) / slope);
            } else if slope < T::zero() {
                lo = lo.max((base - bound) / -slope);
            } else if base > bound {
                hi = -T::one();
            }
        };
        match self {
            PerformanceConstraint::ComponentWise(v) => {
                for i in 0..v.nrows() {
                    for j in 0..v.ncols() {
                        if v[(i, j)].is_finite_value() {
                            limit(response.base[(i, j)], response.slope[(i, j)], v[(i, j)]);
                        }
                    }
                }
            }
            PerformanceConstraint::Trace(b) => limit(response.base.trace(), response.slope.trace(), *b),
        }
        (lo <= hi && hi >= T::zero()).then_some((lo, hi))
    }

    /// Largest admissible `σγ²`; `None` when the quantization floor alone
    /// already violates the constraint.
    pub fn max_noise_variance(&self, response: &ErrorResponse<T>) -> Option<T> {
        self.noise_interval(response).map(|(_, hi)| hi)
    }
}

/// Plant, prior, horizon, constraint and memory technology: everything an
/// allocation is optimized against except the fixed-point format.
#[derive(Clone, Debug)]
pub struct EnergyProblem<T: Scalar> {
    pub model: StateSpaceModel<T>,
    pub p0: DMatrix<T>,
    pub steps: usize,
    pub constraint: PerformanceConstraint<T>,
    pub params: MemoryNoiseParams<T>,
}

impl<T: Scalar> EnergyProblem<T> {
    pub fn new(
        model: StateSpaceModel<T>,
        p0: DMatrix<T>,
        steps: usize,
        constraint: PerformanceConstraint<T>,
        params: MemoryNoiseParams<T>,
    ) -> Result<Self> {
        constraint.check_dim(model.state_dim())?;
        if steps == 0 {
            return Err(Error::InvalidParameter {
                name: "steps",
                reason: "at least one step is required".into(),
            });
        }
        Ok(Self {
            model,
            p0,
            steps,
            constraint,
            params,
        })
    }

    /// `P*_{N|N}` as a function of `σγ²` for format `fmt`.
    pub fn response(&self, fmt: FixedPointFormat) -> Result<ErrorResponse<T>> {
        let schedule = precompute_gains(&self.model, &self.p0, self.steps, fmt)?;
        ErrorResponse::new(&self.model, &schedule)
    }
}

/// Greedy search knobs: energy increment `beta`, stall threshold `xi` on the
/// max-norm change of `P*` between increments, and a hard cap on increments.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WaterfillSettings<T: Scalar> {
    pub beta: T,
    pub xi: T,
    pub max_iterations: usize,
}

impl<T: Scalar> Default for WaterfillSettings<T> {
    fn default() -> Self {
        Self {
            beta: T::lit(0.01),
            xi: T::lit(1e-8),
            max_iterations: 1_000_000,
        }
    }
}

impl<T: Scalar> WaterfillSettings<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > T::zero()) || !self.beta.is_finite_value() {
            return Err(Error::InvalidParameter {
                name: "beta",
                reason: format!("must be positive and finite, got {}", self.beta),
            });
        }
        if !(self.xi > T::zero()) {
            return Err(Error::InvalidParameter {
                name: "xi",
                reason: format!("must be positive, got {}", self.xi),
            });
        }
        Ok(())
    }
}

/// A set of banks sharing one energy level: `size` banks whose bit weights
/// `4^b` add up to `weight`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelGroup<T: Scalar> {
    pub size: usize,
    pub weight: T,
}

impl<T: Scalar> LevelGroup<T> {
    /// Group of the bits with significances `bits`.
    pub fn from_bits(bits: impl IntoIterator<Item = i32>) -> Self {
        let mut size = 0;
        let mut weight = T::zero();
        for b in bits {
            size += 1;
            weight += pow4::<T>(b);
        }
        Self { size, weight }
    }
}

/// Continuous optimum of the grouped problem for a noise ceiling `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct WaterLevel<T: Scalar> {
    /// Total energy `ẽ_ℓ` of each group (each bank gets `ẽ_ℓ / n_ℓ`).
    pub level_energies: Vec<T>,
    /// Dual variable of the noise constraint; zero when it is inactive.
    pub lambda: T,
    pub pinned: Vec<bool>,
}

/// Minimizes `Σ ẽ_ℓ` subject to `Σ W_ℓ exp(-a ẽ_ℓ / n_ℓ) <= s` and
/// `ẽ_ℓ >= n_ℓ e_thres`.
///
/// Stationarity gives `W_ℓ exp(-a ẽ_ℓ / n_ℓ) = n_ℓ / (a λ)` for every free
/// group, i.e. `ẽ_ℓ = (n_ℓ / a) ln(a λ W_ℓ / n_ℓ)`. Groups whose floor noise
/// per bank is already below the water line stay pinned; the rest share what
/// is left of `s`. Returns `None` if `s <= 0` (no finite allocation works).
pub fn water_fill_levels<T: Scalar>(
    groups: &[LevelGroup<T>],
    params: &MemoryNoiseParams<T>,
    s: T,
) -> Option<WaterLevel<T>> {
    let a = params.a();
    let p_floor = bit_flip_probability(params.e_thres(), a);
    let floor_energy = |g: &LevelGroup<T>| params.e_thres() * T::from_usize_lossy(g.size);
    let floor_noise: T = groups.iter().fold(T::zero(), |acc, g| acc + g.weight * p_floor);
    if floor_noise <= s {
        return Some(WaterLevel {
            level_energies: groups.iter().map(floor_energy).collect(),
            lambda: T::zero(),
            pinned: vec![true; groups.len()],
        });
    }
    if !(s > T::zero()) {
        return None;
    }

    // Pin the groups with the least floor noise per bank first.
    let ratio = |g: &LevelGroup<T>| g.weight * p_floor / T::from_usize_lossy(g.size);
    let mut order: Vec<usize> = (0..groups.len()).filter(|&i| groups[i].size > 0).collect();
    order.sort_by(|&x, &y| {
        ratio(&groups[x])
            .partial_cmp(&ratio(&groups[y]))
            .unwrap()
            .then(x.cmp(&y))
    });

    let total_banks: usize = order.iter().map(|&i| groups[i].size).sum();
    let mut pinned_noise = T::zero();
    let mut pinned_banks = 0usize;
    let mut k = 0;
    // Per-bank noise of each free group: mu = 1 / (a λ).
    let mu = loop {
        let mu = (s - pinned_noise) / T::from_usize_lossy(total_banks - pinned_banks);
        if k == order.len() - 1 || ratio(&groups[order[k]]) > mu {
            break mu;
        }
        let g = &groups[order[k]];
        pinned_noise += g.weight * p_floor;
        pinned_banks += g.size;
        k += 1;
    };
    let mut pinned = vec![false; groups.len()];
    let level_energies = groups
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let n = T::from_usize_lossy(g.size);
            if g.size == 0 {
                return T::zero();
            }
            let free = (n / a) * (g.weight / (n * mu)).ln();
            if free <= floor_energy(g) {
                pinned[i] = true;
                floor_energy(g)
            } else {
                free
            }
        })
        .collect();
    Some(WaterLevel {
        level_energies,
        lambda: T::one() / (a * mu),
        pinned,
    })
}

/// Per-bank continuous water-filling solution for a noise ceiling `s`:
/// `e_b = max(e_thres, ln(a λ 4^b) / a)`.
pub fn closed_form_allocation<T: Scalar>(
    fmt: FixedPointFormat,
    params: &MemoryNoiseParams<T>,
    s: T,
) -> Option<(EnergyVector<T>, T)> {
    let groups: Vec<LevelGroup<T>> = fmt.bit_positions().map(|b| LevelGroup::from_bits([b])).collect();
    let wl = water_fill_levels(&groups, params, s)?;
    let ev = EnergyVector::new(fmt, wl.level_energies).ok()?;
    Some((ev, wl.lambda))
}
