//! Per-bank greedy water-filling and the search over fractional bits.

use super::{Binding, EnergyProblem, PerformanceConstraint, WaterfillSettings};
use crate::error::{Error, Result};
use crate::error_theory::ErrorResponse;
use crate::fixedpoint::FixedPointFormat;
use crate::memory_model::{bit_flip_probability, EnergyVector, MemoryNoiseParams};
use crate::scalar::{pow4, Scalar};
use nalgebra::DMatrix;
use rayon::prelude::*;

/// Why the greedy loop stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    /// The constraint holds.
    Feasible,
    /// `P*` moved by at most `xi` in one increment while still violating the
    /// constraint: more energy cannot help at this format.
    Stalled,
    IterationLimit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BitwiseSolution<T: Scalar> {
    pub energies: EnergyVector<T>,
    pub e_tot: T,
    pub feasible: bool,
    /// Water level estimated from the banks above the floor (zero if none).
    pub lambda: T,
    pub sigma_gamma2: T,
    pub p_star: DMatrix<T>,
    pub iterations: usize,
    pub termination: Termination,
    /// Tightest (or most violated) constrained entry at the returned point.
    pub binding: Option<Binding<T>>,
    /// The error recursion was only approximate (non-integer `F` or `H`).
    pub approximate: bool,
}

impl<T: Scalar> BitwiseSolution<T> {
    pub fn format(&self) -> FixedPointFormat {
        self.energies.format()
    }

    /// Fractional bits of the solution's format.
    pub fn m(&self) -> u32 {
        self.format().m()
    }

    fn build(
        energies: EnergyVector<T>,
        response: &ErrorResponse<T>,
        constraint: &PerformanceConstraint<T>,
        params: &MemoryNoiseParams<T>,
        iterations: usize,
        termination: Termination,
    ) -> Self {
        let sigma_gamma2 = crate::memory_model::memory_noise_variance(&energies, params);
        let p_star = response.at(sigma_gamma2);
        let e_thres = params.e_thres();
        let (sum, count) = energies
            .format()
            .bit_positions()
            .zip(energies.energies())
            .filter(|(_, &e)| e > e_thres)
            .fold((T::zero(), 0usize), |(s, k), (b, &e)| {
                (s + pow4::<T>(b) * bit_flip_probability(e, params.a()), k + 1)
            });
        let lambda = if count == 0 {
            T::zero()
        } else {
            T::from_usize_lossy(count) / (params.a() * sum)
        };
        Self {
            e_tot: energies.total_energy(),
            feasible: termination == Termination::Feasible,
            lambda,
            sigma_gamma2,
            binding: constraint.binding_entry(&p_star),
            p_star,
            iterations,
            termination,
            energies,
            approximate: response.approximate,
        }
    }
}

fn max_abs_diff<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    a.iter()
        .zip(b.iter())
        .fold(T::zero(), |acc, (x, y)| acc.max((*x - *y).abs()))
}

/// Greedy allocation for a fixed format against a precomputed response.
///
/// Starts with every bank at `e_thres` and repeatedly adds `beta` to the bank
/// with the largest `4^b exp(-a e_b)` (the largest noise reduction per unit
/// energy; ties go to the more significant bank) until the constraint holds.
/// Since the objective is separable and each term convex, every intermediate
/// vector is the cheapest one on its `beta` lattice for its noise level.
pub fn waterfill_on<T: Scalar>(
    response: &ErrorResponse<T>,
    fmt: FixedPointFormat,
    constraint: &PerformanceConstraint<T>,
    params: &MemoryNoiseParams<T>,
    settings: &WaterfillSettings<T>,
) -> Result<BitwiseSolution<T>> {
    settings.validate()?;
    let a = params.a();
    let weights: Vec<T> = fmt.bit_positions().map(pow4::<T>).collect();
    let mut e = vec![params.e_thres(); weights.len()];
    let mut terms: Vec<T> = weights
        .iter()
        .map(|&w| w * bit_flip_probability(params.e_thres(), a))
        .collect();
    let sigma = |terms: &[T]| terms.iter().fold(T::zero(), |acc, &t| acc + t);

    let mut p = response.at(sigma(&terms));
    let mut iterations = 0;
    let termination = loop {
        if constraint.is_satisfied(&p) {
            break Termination::Feasible;
        }
        if iterations >= settings.max_iterations {
            break Termination::IterationLimit;
        }
        let mut best = 0;
        for (i, &t) in terms.iter().enumerate() {
            if t >= terms[best] {
                best = i;
            }
        }
        e[best] += settings.beta;
        terms[best] = weights[best] * bit_flip_probability(e[best], a);
        iterations += 1;
        let next = response.at(sigma(&terms));
        let moved = max_abs_diff(&next, &p);
        p = next;
        if !constraint.is_satisfied(&p) && moved <= settings.xi {
            break Termination::Stalled;
        }
    };
    let ev = EnergyVector::new(fmt, e)?;
    Ok(BitwiseSolution::build(
        ev,
        response,
        constraint,
        params,
        iterations,
        termination,
    ))
}

/// Greedy per-bank allocation for format `fmt`.
pub fn waterfill_bitwise<T: Scalar>(
    problem: &EnergyProblem<T>,
    fmt: FixedPointFormat,
    settings: &WaterfillSettings<T>,
) -> Result<BitwiseSolution<T>> {
    let response = problem.response(fmt)?;
    waterfill_on(&response, fmt, &problem.constraint, &problem.params, settings)
}

/// Same shared energy in every bank, bisected until the bracket around the
/// smallest feasible value is at most `beta` wide; the feasible end is
/// returned.
pub fn uniform_on<T: Scalar>(
    response: &ErrorResponse<T>,
    fmt: FixedPointFormat,
    constraint: &PerformanceConstraint<T>,
    params: &MemoryNoiseParams<T>,
    settings: &WaterfillSettings<T>,
) -> Result<BitwiseSolution<T>> {
    settings.validate()?;
    let weight = fmt.bit_positions().fold(T::zero(), |acc, b| acc + pow4::<T>(b));
    let feasible_at = |e: T| constraint.is_satisfied(&response.at(weight * bit_flip_probability(e, params.a())));
    let finish = |e: T, iterations: usize, termination: Termination| -> Result<BitwiseSolution<T>> {
        let ev = EnergyVector::uniform(fmt, e)?;
        Ok(BitwiseSolution::build(
            ev,
            response,
            constraint,
            params,
            iterations,
            termination,
        ))
    };

    let mut lo = params.e_thres();
    if feasible_at(lo) {
        return finish(lo, 0, Termination::Feasible);
    }
    if constraint.noise_interval(response).is_none() {
        return finish(lo, 0, Termination::Stalled);
    }
    let mut width = T::one();
    let mut hi = lo + width;
    let mut iterations = 0;
    while !feasible_at(hi) {
        iterations += 1;
        if iterations >= settings.max_iterations || !hi.is_finite_value() {
            return finish(lo, iterations, Termination::IterationLimit);
        }
        lo = hi;
        width *= T::lit(2.0);
        hi = lo + width;
    }
    while hi - lo > settings.beta {
        iterations += 1;
        let mid = (lo + hi) / T::lit(2.0);
        if feasible_at(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    finish(hi, iterations, Termination::Feasible)
}

/// Uniform-energy baseline for format `fmt`.
pub fn uniform_allocation_baseline<T: Scalar>(
    problem: &EnergyProblem<T>,
    fmt: FixedPointFormat,
    settings: &WaterfillSettings<T>,
) -> Result<BitwiseSolution<T>> {
    let response = problem.response(fmt)?;
    uniform_on(&response, fmt, &problem.constraint, &problem.params, settings)
}

/// Greedy solutions for every `m` in `0..=max_m` at `n` integer bits.
#[derive(Clone, Debug)]
pub struct BitSearch<T: Scalar> {
    pub per_m: Vec<BitwiseSolution<T>>,
    best: Option<usize>,
}

impl<T: Scalar> BitSearch<T> {
    /// Feasible solution with the least total energy (smallest `m` on ties).
    pub fn best(&self) -> Option<&BitwiseSolution<T>> {
        self.best.map(|i| &self.per_m[i])
    }

    pub fn is_feasible(&self) -> bool {
        self.best.is_some()
    }

    /// Smallest `m` with a feasible allocation.
    pub fn minimal_feasible_m(&self) -> Option<u32> {
        self.per_m.iter().find(|s| s.feasible).map(|s| s.m())
    }

    pub fn at_m(&self, m: u32) -> Option<&BitwiseSolution<T>> {
        self.per_m.iter().find(|s| s.m() == m)
    }
}

/// Runs the greedy allocation for each `m` in `0..=max_m` (in parallel) and
/// keeps the cheapest feasible one.
pub fn optimize_bits_and_energy<T: Scalar>(
    problem: &EnergyProblem<T>,
    n: u32,
    max_m: u32,
    settings: &WaterfillSettings<T>,
) -> Result<BitSearch<T>> {
    if max_m < 1 {
        return Err(Error::InvalidParameter {
            name: "m_max",
            reason: "must be at least 1".into(),
        });
    }
    let first = if n == 0 { 1 } else { 0 };
    let per_m = (first..=max_m)
        .into_par_iter()
        .map(|m| waterfill_bitwise(problem, FixedPointFormat::new(n, m)?, settings))
        .collect::<Result<Vec<_>>>()?;
    let mut best: Option<usize> = None;
    for (i, s) in per_m.iter().enumerate() {
        if s.feasible && best.is_none_or(|b| s.e_tot < per_m[b].e_tot) {
            best = Some(i);
        }
    }
    Ok(BitSearch { per_m, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy_optimizer::closed_form_allocation;
    use crate::scenario::tracking2d;

    fn problem(v00: f64, e_thres: f64) -> EnergyProblem<f64> {
        let s = tracking2d::<f64>();
        EnergyProblem::new(
            s.model,
            s.p0,
            250,
            PerformanceConstraint::position(2, v00).unwrap(),
            MemoryNoiseParams::new(12.8, e_thres).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn inactive_constraint_keeps_floor() {
        let p = problem(1e6, 2.0);
        let fmt = FixedPointFormat::new(8, 10).unwrap();
        let s = waterfill_bitwise(&p, fmt, &WaterfillSettings::default()).unwrap();
        assert!(s.feasible);
        assert_eq!(s.iterations, 0);
        assert!(s.energies.energies().iter().all(|&e| e == 2.0));
        assert_eq!(s.lambda, 0.0);
    }

    #[test]
    fn greedy_tracks_continuous_water_line() {
        let p = problem(15.0, 0.1);
        let fmt = FixedPointFormat::new(8, 10).unwrap();
        let settings = WaterfillSettings::default();
        let s = waterfill_bitwise(&p, fmt, &settings).unwrap();
        assert!(s.feasible);
        let ceiling = p.constraint.max_noise_variance(&p.response(fmt).unwrap()).unwrap();
        assert!(s.sigma_gamma2 <= ceiling);
        let (cont, _) = closed_form_allocation(fmt, &p.params, ceiling).unwrap();
        for (g, c) in s.energies.energies().iter().zip(cont.energies()) {
            assert!((g - c).abs() <= settings.beta + 1e-9, "{g} vs {c}");
        }
        assert!(s.e_tot >= cont.total_energy() - 1e-9);
    }

    #[test]
    fn uniform_bracket_is_tight() {
        let p = problem(15.0, 0.1);
        let fmt = FixedPointFormat::new(8, 10).unwrap();
        let settings = WaterfillSettings::default();
        let u = uniform_allocation_baseline(&p, fmt, &settings).unwrap();
        assert!(u.feasible);
        let e = u.energies.energies()[0];
        let below = EnergyVector::uniform(fmt, e - settings.beta).unwrap();
        let r = p.response(fmt).unwrap();
        let sg = crate::memory_model::memory_noise_variance(&below, &p.params);
        assert!(!p.constraint.is_satisfied(&r.at(sg)));
    }

    #[test]
    fn too_few_bits_is_infeasible() {
        let p = problem(15.0, 0.1);
        let fmt = FixedPointFormat::new(8, 4).unwrap();
        let s = waterfill_bitwise(&p, fmt, &WaterfillSettings::default()).unwrap();
        assert!(!s.feasible);
        assert_eq!(s.termination, Termination::Stalled);
        let u = uniform_allocation_baseline(&p, fmt, &WaterfillSettings::default()).unwrap();
        assert!(!u.feasible);
    }
}
