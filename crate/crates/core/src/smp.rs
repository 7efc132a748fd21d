//! Maximum-principle inequality scan, the cost functional and an
//! exhaustive search over piecewise-constant controls.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::adjoint::{
    hamiltonian, r_tau, solve_first_adjoint, solve_second_adjoint, trace_term, AdjointKind, AdjointOptions,
    AdjointSolution, SecondOrderAdjoint,
};
use crate::error::{Error, Result};
use crate::model::{ProblemSpec, BOX_LATTICE_POINTS};
use crate::report::{fmt_f64, num, nums, write_csv};
use crate::simulate::{simulate_with_cache, ControlProcess, IncrementCache, PathEnsemble, TimeGrid};
use crate::stats::MeanSe;
use crate::terminal::{analyze_ensemble, TerminalAnalysis, TerminalCase, H_MIN};

/// Largest admissible number of candidate controls in a brute-force run.
pub const BRUTE_FORCE_BUDGET: u128 = 1 << 20;

/// Largest tolerated share of paths violating the inequality in one cell.
pub const MAX_VIOLATION_FRACTION: f64 = 1e-3;

/// Base of the pass band: `tol = TOL_FLOOR + 3 SE`.
pub const TOL_FLOOR: f64 = 1e-6;

/// Monte Carlo cost `E[int_0^tau f dt + g(X(tau))]` along `ensemble`
/// (left-point rule, partial last step).
pub fn cost_functional(spec: &ProblemSpec, ensemble: &PathEnsemble, tau: f64) -> MeanSe {
    let grid = ensemble.grid();
    let dt = grid.dt();
    let full = (((tau / dt) * (1.0 + 1e-12)).floor() as usize).min(grid.steps());
    let rem = (tau - grid.time(full)).max(0.0);
    let mut point = vec![0.0; spec.vars.len()];
    let values: Vec<f64> = ensemble
        .valid_paths()
        .map(|p| {
            let mut acc = 0.0;
            for step in 0..full {
                set_point(&mut point, ensemble.state(p, step), ensemble.control().at_step(step));
                acc += spec.f.value.eval_scalar(&point) * dt;
            }
            if rem > 0.0 && full < grid.steps() {
                set_point(&mut point, ensemble.state(p, full), ensemble.control().at_step(full));
                acc += spec.f.value.eval_scalar(&point) * rem;
            }
            let x = ensemble.state_at(p, tau);
            set_point(&mut point, &x, &[]);
            acc + spec.g.value.eval_scalar(&point)
        })
        .collect();
    MeanSe::of(&values)
}

fn set_point(point: &mut [f64], x: &[f64], u: &[f64]) {
    point[..x.len()].copy_from_slice(x);
    point[x.len()..x.len() + u.len()].copy_from_slice(u);
}

/// Cost and constraint adjoints of both orders for one candidate.
#[derive(Debug, Clone)]
pub struct AdjointSet {
    pub cost: AdjointSolution,
    pub cost_second: SecondOrderAdjoint,
    pub constraint: AdjointSolution,
    pub constraint_second: SecondOrderAdjoint,
}

pub fn solve_adjoints(spec: &ProblemSpec, candidate: &TerminalAnalysis, options: AdjointOptions) -> Result<AdjointSet> {
    let ens = &candidate.ensemble;
    let tau = candidate.tau();
    let cost = solve_first_adjoint(spec, ens, tau, AdjointKind::Cost, options)?;
    let cost_second = solve_second_adjoint(spec, ens, &cost, options)?;
    let constraint = solve_first_adjoint(spec, ens, tau, AdjointKind::Constraint, options)?;
    let constraint_second = solve_second_adjoint(spec, ens, &constraint, options)?;
    Ok(AdjointSet { cost, cost_second, constraint, constraint_second })
}

/// Which left-hand side is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Includes the terminal-time shift term `k / h * R`.
    WithCorrection,
    /// Hamiltonian difference and trace term only.
    WithoutCorrection,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::WithCorrection => "with_correction",
            Variant::WithoutCorrection => "without_correction",
        }
    }

    /// Variants the inequality takes in each terminal case.
    pub fn for_case(case: TerminalCase) -> &'static [Variant] {
        match case {
            TerminalCase::Interior => &[Variant::WithCorrection],
            TerminalCase::AtHorizon => &[Variant::WithCorrection, Variant::WithoutCorrection],
            TerminalCase::NoCrossing => &[Variant::WithoutCorrection],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub tau: f64,
    pub u: Vec<f64>,
    pub lhs: f64,
    pub se: f64,
    pub tol: f64,
    /// Share of paths with a pathwise value below `-tol`.
    pub violation_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VariantReport {
    pub variant: Variant,
    pub cells: Vec<Cell>,
    pub min_lhs: f64,
    pub argmin_tau: f64,
    pub argmin_u: Vec<f64>,
    pub max_violation_fraction: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmpReport {
    pub case: TerminalCase,
    pub tau_bar: f64,
    pub h_at_tau: f64,
    pub correction: f64,
    pub taus: Vec<f64>,
    pub controls: Vec<Vec<f64>>,
    pub variants: Vec<VariantReport>,
    pub notes: Vec<String>,
}

impl SmpReport {
    /// Every reported variant passes.
    pub fn all_pass(&self) -> bool {
        self.variants.iter().all(|v| v.pass)
    }

    /// At least one variant passes (the boundary case asks for either).
    pub fn any_pass(&self) -> bool {
        self.variants.iter().any(|v| v.pass)
    }

    pub fn variant(&self, v: Variant) -> Option<&VariantReport> {
        self.variants.iter().find(|r| r.variant == v)
    }

    /// Mean left-hand side at `(tau, u)` for the first variant, when `tau`
    /// is on the scan grid.
    pub fn lhs(&self, tau: f64, u: &[f64]) -> Option<f64> {
        self.variants[0].cells.iter().find(|c| c.tau == tau && c.u == u).map(|c| c.lhs)
    }
}

/// Per-path quantities at one scan time.
struct Snapshot {
    x: Vec<f64>,
    p: Vec<f64>,
    k: Vec<f64>,
    big_p: Vec<f64>,
    p0: Vec<f64>,
    k0: Vec<f64>,
    big_p0: Vec<f64>,
}

/// Evaluates the maximum-principle left-hand side
/// `H(u) - H(ubar) [+ k/h R] + 1/2 tr[dsigma' P dsigma]`
/// pathwise on a uniform `tau` grid over `[0, tau_bar]` and every control
/// evaluation point.
pub fn check_smp(spec: &ProblemSpec, candidate: &TerminalAnalysis, adjoints: &AdjointSet, tau_points: usize) -> Result<SmpReport> {
    if tau_points < 2 {
        return Err(Error::Config("the tau grid needs at least 2 points".into()));
    }
    let ens = &candidate.ensemble;
    let case = candidate.case();
    let tau_bar = candidate.tau();
    let variants = Variant::for_case(case);
    let h = candidate.h_at_tau();
    if variants.contains(&Variant::WithCorrection) && !(h.abs() >= H_MIN) {
        return Err(Error::DegenerateRate(h.abs()));
    }
    let correction = r_tau(spec, ens, tau_bar).mean;
    let taus: Vec<f64> = (0..tau_points)
        .map(|i| if i + 1 == tau_points { tau_bar } else { tau_bar * i as f64 / (tau_points - 1) as f64 })
        .collect();
    let controls = spec.domain.evaluation_points(BOX_LATTICE_POINTS);
    let paths: Vec<usize> = ens.valid_paths().collect();

    // Pathwise values `[variant][tau][u][path]`, computed per tau.
    let per_tau: Vec<Vec<Vec<Vec<f64>>>> = taus
        .iter()
        .map(|&t| -> Result<Vec<Vec<Vec<f64>>>> {
            let ubar = ens.control().at_time(t).to_vec();
            let snaps: Vec<Snapshot> = paths
                .par_iter()
                .map(|&p| {
                    let (pp, kk) = adjoints.cost.at(p, t);
                    let (p0, k0) = adjoints.constraint.at(p, t);
                    Snapshot {
                        x: ens.state_at(p, t),
                        p: pp,
                        k: kk,
                        big_p: adjoints.cost_second.p_at(p, t),
                        p0,
                        k0,
                        big_p0: adjoints.constraint_second.p_at(p, t),
                    }
                })
                .collect();
            let by_u: Vec<Vec<(f64, f64)>> = controls
                .iter()
                .map(|u| {
                    snaps
                        .par_iter()
                        .map(|s| -> Result<(f64, f64)> {
                            if *u == ubar {
                                return Ok((0.0, 0.0));
                            }
                            let hu = hamiltonian(spec, &s.x, u, &s.p, &s.k, AdjointKind::Cost)?.value;
                            let hb = hamiltonian(spec, &s.x, &ubar, &s.p, &s.k, AdjointKind::Cost)?.value;
                            let trace = trace_term(spec, &s.x, u, &ubar, &s.big_p);
                            let base = hu - hb + trace;
                            let ku = hamiltonian(spec, &s.x, u, &s.p0, &s.k0, AdjointKind::Constraint)?.value;
                            let kb = hamiltonian(spec, &s.x, &ubar, &s.p0, &s.k0, AdjointKind::Constraint)?.value;
                            let kernel = ku - kb + trace_term(spec, &s.x, u, &ubar, &s.big_p0);
                            Ok((base + kernel / h * correction, base))
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<_>>()?;
            Ok(variants
                .iter()
                .map(|v| {
                    by_u.iter()
                        .map(|vals| {
                            vals.iter()
                                .map(|(with, without)| if *v == Variant::WithCorrection { *with } else { *without })
                                .collect()
                        })
                        .collect()
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut reports = Vec::with_capacity(variants.len());
    for (vi, &variant) in variants.iter().enumerate() {
        let mut cells = Vec::with_capacity(taus.len() * controls.len());
        for (ti, &t) in taus.iter().enumerate() {
            for (ui, u) in controls.iter().enumerate() {
                let vals = &per_tau[ti][vi][ui];
                let stat = MeanSe::of(vals);
                let se = stat.se_or_zero();
                let tol = TOL_FLOOR + 3.0 * se;
                let bad = vals.iter().filter(|v| **v < -tol).count();
                cells.push(Cell {
                    tau: t,
                    u: u.clone(),
                    lhs: stat.mean,
                    se,
                    tol,
                    violation_fraction: bad as f64 / vals.len() as f64,
                });
            }
        }
        let argmin = cells
            .iter()
            .enumerate()
            .fold(0, |best, (i, c)| if c.lhs < cells[best].lhs { i } else { best });
        let max_violation = cells.iter().map(|c| c.violation_fraction).fold(0.0, f64::max);
        let pass = cells.iter().all(|c| c.lhs >= -c.tol) && max_violation <= MAX_VIOLATION_FRACTION;
        reports.push(VariantReport {
            variant,
            min_lhs: cells[argmin].lhs,
            argmin_tau: cells[argmin].tau,
            argmin_u: cells[argmin].u.clone(),
            max_violation_fraction: max_violation,
            pass,
            cells,
        });
    }

    let mut notes = vec![
        "grid scan over (tau, u): a failed cell falsifies the candidate, passing cells do not prove optimality".to_string(),
        "trace term uses the scanned control u in both diffusion factors".to_string(),
    ];
    if case == TerminalCase::AtHorizon {
        notes.push("crossing at the horizon: both inequality variants are reported separately".to_string());
    }
    if adjoints.constraint.is_shared() && !spec.is_deterministic() {
        notes.push("ODE backend on a stochastic problem: adjoints are path means and K = Q = 0".to_string());
    }
    Ok(SmpReport { case, tau_bar, h_at_tau: h, correction, taus, controls, variants: reports, notes })
}

fn fmt_control(u: &[f64]) -> String {
    u.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(";")
}

/// CSV `tau, u, lhs, se, variant`.
pub fn write_smp_csv(path: &Path, report: &SmpReport) -> Result<()> {
    let rows = report.variants.iter().flat_map(|v| {
        v.cells.iter().map(move |c| {
            vec![fmt_f64(c.tau), fmt_control(&c.u), fmt_f64(c.lhs), fmt_f64(c.se), v.variant.name().to_string()]
        })
    });
    write_csv(path, &["tau", "u", "lhs", "se", "variant"], rows)
}

fn variant_json(v: &VariantReport) -> Value {
    json!({
        "variant": v.variant.name(),
        "min_lhs": num(v.min_lhs),
        "argmin_tau": num(v.argmin_tau),
        "argmin_u": nums(&v.argmin_u),
        "max_violation_fraction": num(v.max_violation_fraction),
        "verdict": if v.pass { "pass" } else { "fail" },
    })
}

/// Report `{case, min_lhs, argmin_tau, argmin_u, verdict, variant, ...}`;
/// the top-level fields describe the first variant.
pub fn smp_json(report: &SmpReport) -> Value {
    let first = &report.variants[0];
    json!({
        "case": report.case.tag(),
        "tau_bar": num(report.tau_bar),
        "h_at_tau": num(report.h_at_tau),
        "correction": num(report.correction),
        "min_lhs": num(first.min_lhs),
        "argmin_tau": num(first.argmin_tau),
        "argmin_u": nums(&first.argmin_u),
        "verdict": if first.pass { "pass" } else { "fail" },
        "variant": first.variant.name(),
        "variants": report.variants.iter().map(variant_json).collect::<Vec<_>>(),
        "notes": report.notes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BruteForceRow {
    pub index: usize,
    pub control: Vec<Vec<f64>>,
    pub tau: f64,
    pub case: TerminalCase,
    pub cost: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BruteForceReport {
    pub intervals: usize,
    pub rows: Vec<BruteForceRow>,
    pub best: usize,
    /// Row of the constant candidate control.
    pub candidate: usize,
    /// `J(candidate) - J(best)`.
    pub margin: f64,
    /// `J(candidate) <= J(best) + 3 SE(candidate)`.
    pub candidate_optimal: bool,
}

impl BruteForceReport {
    pub fn best_row(&self) -> &BruteForceRow {
        &self.rows[self.best]
    }

    pub fn candidate_row(&self) -> &BruteForceRow {
        &self.rows[self.candidate]
    }
}

/// Exhaustive cost evaluation over controls that are constant on each of
/// `intervals` equal pieces of `[0, T]`, all sharing one set of Brownian
/// increments. Row `i` encodes its control in base `|U|` with interval 0 as
/// the most significant digit; row 0 is the constant first point. Ties keep
/// the earlier row.
pub fn brute_force_search(
    spec: &ProblemSpec,
    intervals: usize,
    grid_steps: usize,
    n_paths: usize,
    seed: u64,
    candidate: &[f64],
) -> Result<BruteForceReport> {
    if intervals == 0 {
        return Err(Error::Config("brute force needs at least one interval".into()));
    }
    let points = spec.domain.evaluation_points(BOX_LATTICE_POINTS);
    let base = points.len() as u128;
    let total = (0..intervals).try_fold(1u128, |acc, _| acc.checked_mul(base)).unwrap_or(u128::MAX);
    if total > BRUTE_FORCE_BUDGET {
        return Err(Error::Budget(total));
    }
    let cand_digit = points
        .iter()
        .position(|p| p.as_slice() == candidate)
        .ok_or_else(|| Error::Control("candidate is not a control evaluation point".into()))?;
    let steps = grid_steps.div_ceil(intervals) * intervals;
    let grid = TimeGrid::new(spec.horizon, steps)?;
    let cache = IncrementCache::new(&grid, spec.noise_dim, n_paths, seed);
    let decode = |mut idx: usize| -> Vec<Vec<f64>> {
        let mut digits = vec![0; intervals];
        for slot in digits.iter_mut().rev() {
            *slot = idx % points.len();
            idx /= points.len();
        }
        digits.into_iter().map(|d| points[d].clone()).collect()
    };
    let rows: Vec<BruteForceRow> = (0..total as usize)
        .into_par_iter()
        .map(|index| -> Result<BruteForceRow> {
            let control = decode(index);
            let process = ControlProcess::piecewise(grid, &control)?;
            let run = analyze_ensemble(spec, simulate_with_cache(spec, &process, &cache)?)?;
            let j = cost_functional(spec, &run.ensemble, run.tau());
            Ok(BruteForceRow { index, control, tau: run.tau(), case: run.case(), cost: j.mean, se: j.se_or_zero() })
        })
        .collect::<Result<_>>()?;
    let best = rows
        .iter()
        .enumerate()
        .fold(0, |b, (i, r)| if r.cost < rows[b].cost { i } else { b });
    let candidate = (0..intervals).fold(0usize, |acc, _| acc * points.len() + cand_digit);
    let margin = rows[candidate].cost - rows[best].cost;
    let candidate_optimal = margin <= 3.0 * rows[candidate].se;
    Ok(BruteForceReport { intervals, rows, best, candidate, margin, candidate_optimal })
}

/// CSV `index, control, tau, case, cost, se`.
pub fn write_brute_force_csv(path: &Path, report: &BruteForceReport) -> Result<()> {
    let rows = report.rows.iter().map(|r| {
        let control = r.control.iter().map(|u| fmt_control(u)).collect::<Vec<_>>().join(" ");
        vec![r.index.to_string(), control, fmt_f64(r.tau), r.case.tag().to_string(), fmt_f64(r.cost), fmt_f64(r.se)]
    });
    write_csv(path, &["index", "control", "tau", "case", "cost", "se"], rows)
}

pub fn brute_force_json(report: &BruteForceReport) -> Value {
    let best = report.best_row();
    let cand = report.candidate_row();
    json!({
        "intervals": report.intervals,
        "controls": report.rows.len(),
        "best_index": best.index,
        "best_control": best.control.iter().map(|u| nums(u)).collect::<Vec<_>>(),
        "best_cost": num(best.cost),
        "best_se": num(best.se),
        "candidate_index": cand.index,
        "candidate_cost": num(cand.cost),
        "candidate_se": num(cand.se),
        "margin": num(report.margin),
        "candidate_optimal": report.candidate_optimal,
        "verdict": if report.candidate_optimal { "pass" } else { "fail" },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjoint::Backend;
    use crate::model::load_problem;
    use crate::terminal::analyze;
    use std::f64::consts::LN_2;

    fn candidate(spec: &ProblemSpec, steps: usize, paths: usize, u: f64) -> TerminalAnalysis {
        let grid = TimeGrid::new(spec.horizon, steps).unwrap();
        analyze(spec, &ControlProcess::constant(grid, &[u]), paths, 11).unwrap()
    }

    fn report(spec: &ProblemSpec, cand: &TerminalAnalysis, backend: Backend) -> SmpReport {
        let adj = solve_adjoints(spec, cand, AdjointOptions { backend, degree: 3 }).unwrap();
        check_smp(spec, cand, &adj, 64).unwrap()
    }

    #[test]
    fn example1_cost() {
        let spec = load_problem("example1").unwrap();
        let c = candidate(&spec, 1000, 1, 1.0);
        assert!((cost_functional(&spec, &c.ensemble, c.tau()).mean - LN_2).abs() < 5e-3);
        let c = candidate(&spec, 1000, 1, 2.0);
        assert!((cost_functional(&spec, &c.ensemble, c.tau()).mean - 2.0 * 1.5f64.ln()).abs() < 5e-3);
    }

    #[test]
    fn example2_cost() {
        let spec = load_problem("example2").unwrap();
        let c = candidate(&spec, 100, 20_000, 1.0);
        assert!((cost_functional(&spec, &c.ensemble, c.tau()).mean - 0.5).abs() < 0.01);
    }

    #[test]
    fn example1_inequality() {
        let spec = load_problem("example1").unwrap();
        let c = candidate(&spec, 100_000, 1, 1.0);
        let r = report(&spec, &c, Backend::Ode);
        assert_eq!(r.case, TerminalCase::Interior);
        assert_eq!(r.variants.len(), 1);
        let v = &r.variants[0];
        assert!(v.pass && v.min_lhs >= -1e-6);
        let at_end = r.lhs(r.tau_bar, &[2.0]).unwrap();
        assert!((at_end - 1.5).abs() < 1e-3, "{at_end}");
        for cell in &v.cells {
            if cell.u == [1.0] {
                assert_eq!(cell.lhs, 0.0);
            } else {
                let expect = 1.0 + (LN_2 - cell.tau).exp() / 2.0;
                assert!((cell.lhs - expect).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn example2_inequality() {
        let spec = load_problem("example2").unwrap();
        let c = candidate(&spec, 100, 5000, 1.0);
        for backend in [Backend::Ode, Backend::Regression] {
            let r = report(&spec, &c, backend);
            assert!(r.all_pass());
            for t in &r.taus {
                assert!((r.lhs(*t, &[2.0]).unwrap() - 1.0).abs() < 0.02);
                assert_eq!(r.lhs(*t, &[1.0]).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn boundary_case_reports_both_variants() {
        let spec = load_problem("example1").unwrap().with_alpha(std::f64::consts::E - 1.0).unwrap();
        let c = candidate(&spec, 1000, 1, 1.0);
        let r = report(&spec, &c, Backend::Ode);
        assert_eq!(r.case, TerminalCase::AtHorizon);
        assert_eq!(r.variants.len(), 2);
        assert!(r.variant(Variant::WithoutCorrection).is_some());
        let v = smp_json(&r);
        assert_eq!(v["variants"].as_array().unwrap().len(), 2);

        let spec = load_problem("example1").unwrap().with_alpha(3.0).unwrap();
        let c = candidate(&spec, 1000, 1, 1.0);
        let r = report(&spec, &c, Backend::Ode);
        assert_eq!(r.variants.len(), 1);
        assert_eq!(r.variants[0].variant, Variant::WithoutCorrection);
    }

    #[test]
    fn refinement_never_raises_the_minimum() {
        let spec = load_problem("example1").unwrap();
        let c = candidate(&spec, 10_000, 1, 1.0);
        let adj = solve_adjoints(&spec, &c, AdjointOptions::default()).unwrap();
        let coarse = check_smp(&spec, &c, &adj, 9).unwrap();
        let fine = check_smp(&spec, &c, &adj, 17).unwrap();
        assert!(coarse.variants[0].min_lhs >= fine.variants[0].min_lhs - 1e-12);
    }

    #[test]
    fn example1_brute_force() {
        let spec = load_problem("example1").unwrap();
        let r = brute_force_search(&spec, 10, 1000, 1, 1, &[1.0]).unwrap();
        assert_eq!(r.rows.len(), 1024);
        assert_eq!(r.best, 0);
        assert_eq!(r.candidate, 0);
        assert!((r.best_row().cost - LN_2).abs() < 5e-3);
        assert!(r.candidate_optimal);
    }

    #[test]
    fn single_control_is_trivially_minimal() {
        let spec = ProblemSpec::build(crate::model::ProblemSource {
            name: "single",
            state_dim: 1,
            noise_dim: 1,
            x0: vec![0.0],
            horizon: 1.0,
            alpha: 1.0,
            domain: crate::model::ControlDomain::finite(vec![vec![1.0]]).unwrap(),
            seed: None,
            b: "x + u",
            sigma: "0",
            f: "u",
            g: "0",
            phi: "x",
        })
        .unwrap();
        let r = brute_force_search(&spec, 1, 100, 1, 1, &[1.0]).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.margin, 0.0);
    }

    #[test]
    fn budget_is_enforced() {
        let spec = load_problem("example1").unwrap();
        assert!(matches!(brute_force_search(&spec, 21, 100, 1, 1, &[1.0]), Err(Error::Budget(_))));
        assert!(brute_force_search(&spec, 2, 100, 1, 1, &[5.0]).is_err());
    }

    #[test]
    fn reports_serialize() {
        let spec = load_problem("example1").unwrap();
        let c = candidate(&spec, 1000, 1, 1.0);
        let r = report(&spec, &c, Backend::Ode);
        let dir = tempfile::tempdir().unwrap();
        write_smp_csv(&dir.path().join("smp.csv"), &r).unwrap();
        let text = std::fs::read_to_string(dir.path().join("smp.csv")).unwrap();
        assert!(text.starts_with("tau,u,lhs,se,variant\n"));
        assert_eq!(text.lines().count(), 1 + 64 * 2);
        let v = smp_json(&r);
        for key in ["case", "min_lhs", "argmin_tau", "argmin_u", "verdict", "variant"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }
}
