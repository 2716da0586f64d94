//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use qkalman::error_theory::ErrorResponse;
use qkalman::scenario::tracking2d;
use qkalman::{EnergyProblem, FixedPointFormat, MemoryNoiseParams, PerformanceConstraint};

pub const A: f64 = 12.8;
pub const E_THRES: f64 = 0.1;

pub fn params() -> MemoryNoiseParams {
    MemoryNoiseParams::new(A, E_THRES).unwrap()
}

/// Tracking model over 250 steps with `P*[0,0] <= bound`.
pub fn tracking_problem(bound: f64) -> EnergyProblem {
    let sc = tracking2d::<f64>();
    EnergyProblem::new(
        sc.model,
        sc.p0,
        250,
        PerformanceConstraint::position(2, bound).unwrap(),
        params(),
    )
    .unwrap()
}

/// Small-format instance whose position bound sits `slack` above the
/// reliable-memory floor.
pub fn small_instance(n: u32, m: u32, slack: f64) -> (FixedPointFormat, ErrorResponse<f64>, PerformanceConstraint) {
    let fmt = FixedPointFormat::new(n, m).unwrap();
    let resp = tracking_problem(1.0).response(fmt).unwrap();
    let c = PerformanceConstraint::position(2, resp.base[(0, 0)] * slack).unwrap();
    (fmt, resp, c)
}

/// Minimum total energy on the lattice `e_thres + k h` per bank, by dynamic
/// programming over banks: `best[K]` is the least `σγ²` reachable with `K`
/// steps in total.
pub fn lattice_optimum(fmt: FixedPointFormat, resp: &ErrorResponse<f64>, c: &PerformanceConstraint, h: f64) -> f64 {
    let ceiling = c.max_noise_variance(resp).unwrap();
    let terms: Vec<Vec<f64>> = fmt
        .bit_positions()
        .map(|b| {
            let w = 4f64.powi(b);
            let mut t = Vec::new();
            let mut k = 0;
            loop {
                let v = w * (-A * (E_THRES + k as f64 * h)).exp();
                t.push(v);
                if v <= ceiling * 1e-12 {
                    break t;
                }
                k += 1;
            }
        })
        .collect();
    let mut best = terms[0].clone();
    for t in &terms[1..] {
        let mut next = vec![f64::INFINITY; best.len() + t.len() - 1];
        for (i, &x) in best.iter().enumerate() {
            for (j, &y) in t.iter().enumerate() {
                if x + y < next[i + j] {
                    next[i + j] = x + y;
                }
            }
        }
        best = next;
    }
    let k = best
        .iter()
        .position(|&s| c.is_satisfied(&resp.at(s)))
        .expect("lattice reaches the ceiling");
    fmt.bits() as f64 * E_THRES + k as f64 * h
}
