//! Allocation with only `L` distinct energy levels, each shared by a
//! contiguous run of bit significances.

use super::{water_fill_levels, Binding, EnergyProblem, LevelGroup, PerformanceConstraint};
use crate::error::{Error, Result};
use crate::error_theory::ErrorResponse;
use crate::fixedpoint::FixedPointFormat;
use crate::memory_model::{memory_noise_variance, EnergyVector, MemoryNoiseParams};
use crate::scalar::{pow4, Scalar};
use nalgebra::DMatrix;
use rayon::prelude::*;
use std::ops::Range;

#[derive(Clone, Debug, PartialEq)]
pub struct LevelSolution<T: Scalar> {
    /// Banks per level, least significant group first.
    pub group_sizes: Vec<usize>,
    /// Total energy `ẽ_ℓ` of each level.
    pub level_energies: Vec<T>,
    /// The same allocation bank by bank (`ẽ_ℓ / n_ℓ` each).
    pub energies: EnergyVector<T>,
    pub e_tot: T,
    pub feasible: bool,
    pub lambda: T,
    pub sigma_gamma2: T,
    pub p_star: DMatrix<T>,
    pub binding: Option<Binding<T>>,
    pub approximate: bool,
}

impl<T: Scalar> LevelSolution<T> {
    pub fn levels(&self) -> usize {
        self.group_sizes.len()
    }

    pub fn format(&self) -> FixedPointFormat {
        self.energies.format()
    }

    /// Significances covered by each level.
    pub fn bit_ranges(&self) -> Vec<Range<i32>> {
        let mut start = -(self.format().m() as i32);
        self.group_sizes
            .iter()
            .map(|&n| {
                let r = start..start + n as i32;
                start = r.end;
                r
            })
            .collect()
    }
}

/// All compositions of `bits` into `levels` positive parts, in lexicographic
/// order.
pub fn compositions(bits: usize, levels: usize) -> Vec<Vec<usize>> {
    fn rec(left: usize, parts: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if parts == 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for first in 1..=left - (parts - 1) {
            prefix.push(first);
            rec(left - first, parts - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if levels >= 1 && levels <= bits {
        rec(bits, levels, &mut Vec::new(), &mut out);
    }
    out
}

fn check_sizes(fmt: FixedPointFormat, sizes: &[usize]) -> Result<()> {
    if sizes.is_empty() || sizes.contains(&0) || sizes.iter().sum::<usize>() != fmt.bits() as usize {
        return Err(Error::InvalidParameter {
            name: "group_sizes",
            reason: format!("{sizes:?} is not a composition of {} bits", fmt.bits()),
        });
    }
    Ok(())
}

/// `weights[start][len - 1]`: summed `4^b` of `len` banks starting at index `start`.
fn group_weights<T: Scalar>(fmt: FixedPointFormat) -> Vec<Vec<T>> {
    let bits: Vec<i32> = fmt.bit_positions().collect();
    (0..bits.len())
        .map(|start| {
            let mut acc = T::zero();
            bits[start..]
                .iter()
                .map(|&b| {
                    acc += pow4::<T>(b);
                    acc
                })
                .collect()
        })
        .collect()
}

fn groups_for<T: Scalar>(weights: &[Vec<T>], sizes: &[usize]) -> Vec<LevelGroup<T>> {
    let mut start = 0;
    sizes
        .iter()
        .map(|&n| {
            let g = LevelGroup {
                size: n,
                weight: weights[start][n - 1],
            };
            start += n;
            g
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn build<T: Scalar>(
    fmt: FixedPointFormat,
    sizes: &[usize],
    level_energies: Vec<T>,
    lambda: T,
    feasible: bool,
    response: &ErrorResponse<T>,
    constraint: &PerformanceConstraint<T>,
    params: &MemoryNoiseParams<T>,
) -> Result<LevelSolution<T>> {
    let mut banks = Vec::with_capacity(fmt.bits() as usize);
    for (&n, &e) in sizes.iter().zip(&level_energies) {
        banks.extend(std::iter::repeat_n(e / T::from_usize_lossy(n), n));
    }
    let energies = EnergyVector::new(fmt, banks)?;
    let sigma_gamma2 = memory_noise_variance(&energies, params);
    let p_star = response.at(sigma_gamma2);
    Ok(LevelSolution {
        group_sizes: sizes.to_vec(),
        e_tot: level_energies.iter().fold(T::zero(), |acc, &e| acc + e),
        level_energies,
        energies,
        feasible,
        lambda,
        sigma_gamma2,
        binding: constraint.binding_entry(&p_star),
        p_star,
        approximate: response.approximate,
    })
}

fn levels_on<T: Scalar>(
    response: &ErrorResponse<T>,
    fmt: FixedPointFormat,
    constraint: &PerformanceConstraint<T>,
    params: &MemoryNoiseParams<T>,
    sizes: &[usize],
) -> Result<LevelSolution<T>> {
    let weights = group_weights::<T>(fmt);
    let groups = groups_for(&weights, sizes);
    let ceiling = constraint.max_noise_variance(response);
    match ceiling.and_then(|s| water_fill_levels(&groups, params, s)) {
        Some(wl) => build(
            fmt,
            sizes,
            wl.level_energies,
            wl.lambda,
            true,
            response,
            constraint,
            params,
        ),
        None => {
            let floor = sizes
                .iter()
                .map(|&n| params.e_thres() * T::from_usize_lossy(n))
                .collect();
            build(fmt, sizes, floor, T::zero(), false, response, constraint, params)
        }
    }
}

/// Cheapest level energies for the given contiguous grouping (sizes listed
/// from the least significant group up).
pub fn optimal_level_energies<T: Scalar>(
    problem: &EnergyProblem<T>,
    fmt: FixedPointFormat,
    group_sizes: &[usize],
) -> Result<LevelSolution<T>> {
    check_sizes(fmt, group_sizes)?;
    let response = problem.response(fmt)?;
    levels_on(&response, fmt, &problem.constraint, &problem.params, group_sizes)
}

/// Best `L`-level allocation over every contiguous grouping of the banks.
pub fn optimize_levels<T: Scalar>(
    problem: &EnergyProblem<T>,
    fmt: FixedPointFormat,
    levels: usize,
) -> Result<LevelSolution<T>> {
    let response = problem.response(fmt)?;
    optimize_levels_on(&response, fmt, &problem.constraint, &problem.params, levels)
}

pub fn optimize_levels_on<T: Scalar>(
    response: &ErrorResponse<T>,
    fmt: FixedPointFormat,
    constraint: &PerformanceConstraint<T>,
    params: &MemoryNoiseParams<T>,
    levels: usize,
) -> Result<LevelSolution<T>> {
    let bits = fmt.bits() as usize;
    if levels < 1 || levels > bits {
        return Err(Error::InvalidParameter {
            name: "levels",
            reason: format!("must be in 1..={bits}, got {levels}"),
        });
    }
    let Some(ceiling) = constraint.max_noise_variance(response) else {
        let mut sizes = vec![bits / levels; levels];
        for s in sizes.iter_mut().take(bits % levels) {
            *s += 1;
        }
        return levels_on(response, fmt, constraint, params, &sizes);
    };
    let weights = group_weights::<T>(fmt);

    fn search<T: Scalar>(
        weights: &[Vec<T>],
        params: &MemoryNoiseParams<T>,
        ceiling: T,
        left: usize,
        parts: usize,
        prefix: &mut Vec<usize>,
        best: &mut Option<(T, Vec<usize>)>,
    ) {
        if parts == 1 {
            prefix.push(left);
            let groups = groups_for(weights, prefix);
            if let Some(wl) = water_fill_levels(&groups, params, ceiling) {
                let e = wl.level_energies.iter().fold(T::zero(), |acc, &x| acc + x);
                if best.as_ref().is_none_or(|(b, _)| e < *b) {
                    *best = Some((e, prefix.clone()));
                }
            }
            prefix.pop();
            return;
        }
        for first in 1..=left - (parts - 1) {
            prefix.push(first);
            search(weights, params, ceiling, left - first, parts - 1, prefix, best);
            prefix.pop();
        }
    }

    let per_first: Vec<Option<(T, Vec<usize>)>> = (1..=bits - (levels - 1))
        .into_par_iter()
        .map(|first| {
            let mut best = None;
            let mut prefix = vec![first];
            if levels == 1 {
                prefix.clear();
                search(&weights, params, ceiling, bits, 1, &mut prefix, &mut best);
            } else {
                search(
                    &weights,
                    params,
                    ceiling,
                    bits - first,
                    levels - 1,
                    &mut prefix,
                    &mut best,
                );
            }
            best
        })
        .collect();
    let mut best: Option<(T, Vec<usize>)> = None;
    for (e, sizes) in per_first.into_iter().flatten() {
        if best.as_ref().is_none_or(|(b, _)| e < *b) {
            best = Some((e, sizes));
        }
    }
    let (_, sizes) = best.expect("a positive ceiling admits every grouping");
    levels_on(response, fmt, constraint, params, &sizes)
}
