//! The sweep and optimization commands.

use super::config::{ExperimentConfig, OptimizeMode};
use super::output::{fmt_num, Table};
use super::CliError;
use crate::energy_optimizer::{
    optimize_bits_and_energy, optimize_levels_on, uniform_on, waterfill_on, BitwiseSolution, EnergyProblem,
    LevelSolution,
};
use crate::error_theory::{theoretical_error_on, NoiseBudget};
use crate::fixedpoint::FixedPointFormat;
use crate::kalman::precompute_gains;
use crate::memory_model::{memory_noise_variance, EnergyVector};
use crate::montecarlo::{estimate_with, FaultyFilter};
use rayon::prelude::*;
use std::fmt::Write as _;

/// Result of a command: a CSV table plus a human-readable report.
#[derive(Debug)]
pub struct Outcome {
    pub table: Table,
    pub report: String,
    pub warnings: Vec<String>,
}

/// Flip probabilities above this void the small-noise approximation behind
/// the memory noise variance; such grid points are flagged.
pub const VALIDITY_MAX_FLIP: f64 = 0.1;

fn format(n: u32, m: u32) -> Result<FixedPointFormat, CliError> {
    FixedPointFormat::new(n, m).map_err(|e| CliError::Config(format!("m_values: {e}")))
}

/// Uniform split of `e_tot` over the banks; infinite energy means reliable
/// memory.
pub fn grid_energies(fmt: FixedPointFormat, e_tot: f64) -> Result<EnergyVector<f64>, CliError> {
    if e_tot.is_infinite() {
        Ok(EnergyVector::reliable(fmt))
    } else {
        EnergyVector::uniform_total(fmt, e_tot).map_err(CliError::Run)
    }
}

fn grid(cfg: &ExperimentConfig) -> Vec<(u32, f64)> {
    cfg.m_values
        .iter()
        .flat_map(|&m| cfg.e_tot_values.iter().map(move |&e| (m, e)))
        .collect()
}

struct TheoryPoint {
    max_flip: f64,
    sigma_gamma2: f64,
    approximate: bool,
    p_star: nalgebra::DMatrix<f64>,
}

fn theory_point(cfg: &ExperimentConfig, m: u32, e_tot: f64) -> Result<TheoryPoint, CliError> {
    let s = &cfg.scenario;
    let fmt = format(cfg.n, m)?;
    let ev = grid_energies(fmt, e_tot)?;
    let schedule = precompute_gains(&s.model, &s.p0, cfg.horizon, fmt)?;
    let budget = NoiseBudget::new(&ev, &cfg.params);
    let p = theoretical_error_on(&s.model, &schedule, &budget)?;
    Ok(TheoryPoint {
        max_flip: ev.max_flip_probability(&cfg.params),
        sigma_gamma2: memory_noise_variance(&ev, &cfg.params),
        approximate: p.approximate,
        p_star: p.p_star,
    })
}

/// `P*_{N|N}` over the `m_values x e_tot_values` grid.
pub fn theory_sweep(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    cfg.require_grid()?;
    let c = cfg.scenario.model.state_dim();
    let points = grid(cfg);
    let results = points
        .par_iter()
        .map(|&(m, e)| theory_point(cfg, m, e))
        .collect::<Result<Vec<_>, _>>()?;

    let mut header = vec![
        "m".to_string(),
        "e_tot".into(),
        "max_flip_probability".into(),
        "sigma_gamma2".into(),
        "approximate".into(),
    ];
    header.extend((0..c).map(|i| format!("p_star_{i}{i}")));
    header.push("p_star_trace".into());
    let mut table = Table::new(header);
    for (&(m, e), t) in points.iter().zip(&results) {
        let mut row = vec![
            m.to_string(),
            fmt_num(e),
            fmt_num(t.max_flip),
            fmt_num(t.sigma_gamma2),
            t.approximate.to_string(),
        ];
        row.extend((0..c).map(|i| fmt_num(t.p_star[(i, i)])));
        row.push(fmt_num(t.p_star.trace()));
        table.push(row);
    }
    let mut warnings = Vec::new();
    if results.iter().any(|t| t.approximate) {
        warnings.push("F or H has non-integer entries; the error recursion is approximate".into());
    }
    Ok(Outcome {
        report: format!("{} grid points\n", points.len()),
        table,
        warnings,
    })
}

/// Theory next to fault-injection Monte Carlo over the grid.
pub fn mc_sweep(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    cfg.require_grid()?;
    cfg.require_trials()?;
    let s = &cfg.scenario;
    let c = s.model.state_dim();
    let mut header = vec![
        "m".to_string(),
        "e_tot".into(),
        "max_flip_probability".into(),
        "valid".into(),
        "trials".into(),
    ];
    for i in 0..c {
        header.push(format!("theory_{i}{i}"));
        header.push(format!("mc_{i}{i}"));
        header.push(format!("mc_se_{i}{i}"));
    }
    header.extend(
        [
            "theory_trace",
            "mc_trace",
            "rel_err_00",
            "rel_err_trace",
            "saturation_rate",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    let mut table = Table::new(header);
    let mut warnings = Vec::new();
    let mut report = String::new();

    for (m, e_tot) in grid(cfg) {
        let fmt = format(cfg.n, m)?;
        let ev = grid_energies(fmt, e_tot)?;
        let schedule = precompute_gains(&s.model, &s.p0, cfg.horizon, fmt)?;
        let theory = theoretical_error_on(&s.model, &schedule, &NoiseBudget::new(&ev, &cfg.params))?.p_star;
        let filter = FaultyFilter::new(&s.model, &schedule, &s.x0_mean, &ev, &cfg.params)?;
        let mc = estimate_with(&filter, cfg.trials, cfg.seed)?;
        let max_flip = ev.max_flip_probability(&cfg.params);
        let valid = max_flip <= VALIDITY_MAX_FLIP;

        let mut row = vec![
            m.to_string(),
            fmt_num(e_tot),
            fmt_num(max_flip),
            valid.to_string(),
            cfg.trials.to_string(),
        ];
        for i in 0..c {
            row.push(fmt_num(theory[(i, i)]));
            row.push(fmt_num(mc.cov[(i, i)]));
            row.push(fmt_num(mc.std_error[(i, i)]));
        }
        let rel00 = (theory[(0, 0)] - mc.cov[(0, 0)]).abs() / theory[(0, 0)];
        let rel_tr = (theory.trace() - mc.cov.trace()).abs() / theory.trace();
        row.extend([
            fmt_num(theory.trace()),
            fmt_num(mc.cov.trace()),
            fmt_num(rel00),
            fmt_num(rel_tr),
            fmt_num(mc.saturation_rate()),
        ]);
        table.push(row);
        let _ = writeln!(
            report,
            "m={m:<3} e_tot={e_tot:<8} theory[0,0]={:.6e} mc[0,0]={:.6e} rel={:.3}{}",
            theory[(0, 0)],
            mc.cov[(0, 0)],
            rel00,
            if valid { "" } else { "  (max p > 0.1: excluded)" }
        );
        if let Some(w) = mc.saturation_warning() {
            warnings.push(format!("m={m} e_tot={e_tot}: {w}"));
        }
    }
    Ok(Outcome {
        table,
        report,
        warnings,
    })
}

fn problem(cfg: &ExperimentConfig) -> Result<EnergyProblem<f64>, CliError> {
    let s = &cfg.scenario;
    let constraint = cfg.require_constraint()?.clone();
    Ok(EnergyProblem::new(
        s.model.clone(),
        s.p0.clone(),
        cfg.horizon,
        constraint,
        cfg.params,
    )?)
}

fn energy_rows(
    table: &mut Table,
    variant: &str,
    levels: Option<usize>,
    ev: &EnergyVector<f64>,
    cfg: &ExperimentConfig,
) {
    let fmt = ev.format();
    for (b, (&e, p)) in fmt
        .bit_positions()
        .zip(ev.energies().iter().zip(ev.flip_probabilities(&cfg.params)))
    {
        table.push(vec![
            variant.to_string(),
            fmt.m().to_string(),
            levels.map_or(String::new(), |l| l.to_string()),
            b.to_string(),
            fmt_num(e),
            fmt_num(p),
        ]);
    }
}

fn energy_table() -> Table {
    Table::new(
        ["variant", "m", "levels", "bit", "energy", "flip_probability"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    )
}

fn infeasible_reason(sol: &BitwiseSolution<f64>) -> String {
    match &sol.binding {
        Some(b) => format!(
            "at m={} the best reachable {} = {:.6e} exceeds its bound {:.6e}",
            sol.m(),
            b.entry,
            b.value,
            b.bound
        ),
        None => format!("at m={} the constraint cannot be met", sol.m()),
    }
}

fn gain(opt: f64, uniform: f64) -> f64 {
    1.0 - opt / uniform
}

/// Energy allocation under the configured bound.
pub fn optimize(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let problem = problem(cfg)?;
    match &cfg.mode {
        OptimizeMode::Bitwise => optimize_bitwise(cfg, &problem),
        OptimizeMode::Uniform => optimize_uniform(cfg, &problem),
        OptimizeMode::Levels(levels) => optimize_with_levels(cfg, &problem, levels),
    }
}

fn optimize_bitwise(cfg: &ExperimentConfig, problem: &EnergyProblem<f64>) -> Result<Outcome, CliError> {
    let search = optimize_bits_and_energy(problem, cfg.n, cfg.m_max, &cfg.settings)?;
    let mut report = String::new();
    let _ = writeln!(
        report,
        "{:>3}  {:>8}  {:>12}  {:>12}  {:>7}",
        "m", "feasible", "e_tot", "uniform", "gain"
    );
    let uniforms = search
        .per_m
        .par_iter()
        .map(|s| {
            let r = problem.response(s.format())?;
            uniform_on(&r, s.format(), &problem.constraint, &problem.params, &cfg.settings)
        })
        .collect::<Result<Vec<_>, _>>()?;
    for (s, u) in search.per_m.iter().zip(&uniforms) {
        if s.feasible {
            let _ = writeln!(
                report,
                "{:>3}  {:>8}  {:>12.6}  {:>12.6}  {:>6.1}%",
                s.m(),
                "yes",
                s.e_tot,
                u.e_tot,
                100.0 * gain(s.e_tot, u.e_tot)
            );
        } else {
            let _ = writeln!(
                report,
                "{:>3}  {:>8}  {:>12}  {:>12}  {:>7}",
                s.m(),
                "no",
                "-",
                "-",
                "-"
            );
        }
    }
    let Some(best) = search.best() else {
        let last = search.per_m.last().expect("at least one m");
        return Err(CliError::Infeasible(format!(
            "no m in 0..={} meets the constraint; {}",
            cfg.m_max,
            infeasible_reason(last)
        )));
    };
    let min_m = search.minimal_feasible_m().expect("best implies feasible");
    let at_min = search.at_m(min_m).expect("present");
    let idx = |m: u32| search.per_m.iter().position(|s| s.m() == m).expect("present");
    let u_best = &uniforms[idx(best.m())];
    let u_min = &uniforms[idx(min_m)];
    let _ = writeln!(
        report,
        "best: m={} e_tot={:.6} (uniform {:.6}, gain {:.1}%)",
        best.m(),
        best.e_tot,
        u_best.e_tot,
        100.0 * gain(best.e_tot, u_best.e_tot)
    );
    let _ = writeln!(
        report,
        "minimal feasible m={} e_tot={:.6} (uniform {:.6}, gain {:.1}%)",
        min_m,
        at_min.e_tot,
        u_min.e_tot,
        100.0 * gain(at_min.e_tot, u_min.e_tot)
    );
    if let Some(b) = &best.binding {
        let _ = writeln!(report, "binding: {} = {:.6e} (bound {:.6e})", b.entry, b.value, b.bound);
    }
    let mut table = energy_table();
    energy_rows(&mut table, "bitwise", None, &best.energies, cfg);
    energy_rows(&mut table, "uniform", None, &u_best.energies, cfg);
    Ok(Outcome {
        table,
        report,
        warnings: Vec::new(),
    })
}

fn optimize_uniform(cfg: &ExperimentConfig, problem: &EnergyProblem<f64>) -> Result<Outcome, CliError> {
    let fmt = format(cfg.n, cfg.require_m()?)?;
    let r = problem.response(fmt)?;
    let u = uniform_on(&r, fmt, &problem.constraint, &problem.params, &cfg.settings)?;
    if !u.feasible {
        return Err(CliError::Infeasible(infeasible_reason(&u)));
    }
    let report = format!(
        "uniform: m={} e_tot={:.6} per bank {:.6}\n",
        u.m(),
        u.e_tot,
        u.energies.energies()[0]
    );
    let mut table = energy_table();
    energy_rows(&mut table, "uniform", None, &u.energies, cfg);
    Ok(Outcome {
        table,
        report,
        warnings: Vec::new(),
    })
}

fn optimize_with_levels(
    cfg: &ExperimentConfig,
    problem: &EnergyProblem<f64>,
    levels: &[usize],
) -> Result<Outcome, CliError> {
    let fmt = format(cfg.n, cfg.require_m()?)?;
    if let Some(&l) = levels.iter().find(|&&l| l > fmt.bits() as usize) {
        return Err(CliError::Config(format!("levels: {l} levels for {} banks", fmt.bits())));
    }
    let r = problem.response(fmt)?;
    let bitwise = waterfill_on(&r, fmt, &problem.constraint, &problem.params, &cfg.settings)?;
    if !bitwise.feasible {
        return Err(CliError::Infeasible(infeasible_reason(&bitwise)));
    }
    let one = optimize_levels_on(&r, fmt, &problem.constraint, &problem.params, 1)?;
    let solutions: Vec<LevelSolution<f64>> = levels
        .iter()
        .map(|&l| optimize_levels_on(&r, fmt, &problem.constraint, &problem.params, l))
        .collect::<Result<_, _>>()?;

    let mut report = String::new();
    let _ = writeln!(
        report,
        "m={} B={} bitwise e_tot={:.6}",
        fmt.m(),
        fmt.bits(),
        bitwise.e_tot
    );
    let _ = writeln!(report, "{:>3}  {:>12}  {:>8}  groups", "L", "e_tot", "savings");
    let full = one.e_tot - bitwise.e_tot;
    let mut table = energy_table();
    for s in &solutions {
        let frac = if full > 0.0 { (one.e_tot - s.e_tot) / full } else { 1.0 };
        let _ = writeln!(
            report,
            "{:>3}  {:>12.6}  {:>7.1}%  {:?}",
            s.levels(),
            s.e_tot,
            100.0 * frac,
            s.group_sizes
        );
        energy_rows(&mut table, "levels", Some(s.levels()), &s.energies, cfg);
    }
    energy_rows(&mut table, "bitwise", None, &bitwise.energies, cfg);
    Ok(Outcome {
        table,
        report,
        warnings: Vec::new(),
    })
}
