//! Constraint rate, mean-constraint curve and the varying terminal time.

use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::model::ProblemSpec;
use crate::report::{fmt_f64, num, opt_num, write_csv};
use crate::simulate::{simulate_ensemble, ControlProcess, PathEnsemble, Workspace};
use crate::stats::MeanSe;

/// Reliability floor for `|h(tau)|`, in curve units per unit time.
pub const H_MIN: f64 = 1e-6;

/// Per-node Monte Carlo estimate of `h(t) = E[l(X(t), u(t))]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintRate {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub se: Vec<Option<f64>>,
}

impl ConstraintRate {
    /// Linear interpolation in time.
    pub fn at(&self, t: f64) -> f64 {
        interpolate(&self.times, &self.values, t)
    }
}

fn interpolate(times: &[f64], values: &[f64], t: f64) -> f64 {
    let n = times.len();
    if t <= times[0] {
        return values[0];
    }
    if t >= times[n - 1] {
        return values[n - 1];
    }
    let dt = times[1] - times[0];
    let i = ((t - times[0]) / dt).floor() as usize;
    let i = i.min(n - 2);
    let theta = (t - times[i]) / (times[i + 1] - times[i]);
    values[i] + theta * (values[i + 1] - values[i])
}

/// Control in force at node `node` (the last step's value at `T`).
fn node_control(ensemble: &PathEnsemble, node: usize) -> &[f64] {
    ensemble.control().at_step(node.min(ensemble.grid().steps() - 1))
}

/// Pathwise `l(X_i, u_i)` for every valid path and node, path-major.
fn integrand_table(spec: &ProblemSpec, ensemble: &PathEnsemble) -> Result<Vec<Vec<f64>>> {
    let nodes = ensemble.grid().nodes();
    let mut ws = Workspace::new(spec);
    let mut table = Vec::with_capacity(ensemble.n_valid());
    for p in ensemble.valid_paths() {
        let mut row = Vec::with_capacity(nodes);
        for node in 0..nodes {
            ws.set(ensemble.state(p, node), node_control(ensemble, node));
            let v = spec.l.value.eval_scalar(&ws.point);
            if !v.is_finite() {
                spec.l.value.eval_checked(&ws.point, &spec.vars)?;
                return Err(Error::NonFiniteCurve(ensemble.grid().time(node)));
            }
            row.push(v);
        }
        table.push(row);
    }
    Ok(table)
}

pub fn constraint_rate(spec: &ProblemSpec, ensemble: &PathEnsemble) -> Result<ConstraintRate> {
    let table = integrand_table(spec, ensemble)?;
    let grid = ensemble.grid();
    let mut values = Vec::with_capacity(grid.nodes());
    let mut se = Vec::with_capacity(grid.nodes());
    let mut column = vec![0.0; table.len()];
    for node in 0..grid.nodes() {
        for (c, row) in column.iter_mut().zip(&table) {
            *c = row[node];
        }
        let s = MeanSe::of(&column);
        values.push(s.mean);
        se.push(s.se);
    }
    Ok(ConstraintRate { times: (0..grid.nodes()).map(|i| grid.time(i)).collect(), values, se })
}

/// Sample mean of `Phi(X(t))` per node alongside the integrated form
/// `Phi(x0) + int_0^t h` (trapezoid rule, pathwise).
#[derive(Debug, Clone, PartialEq)]
pub struct MeanCurve {
    pub times: Vec<f64>,
    pub mean: Vec<f64>,
    pub se: Vec<Option<f64>>,
    pub integrated_mean: Vec<f64>,
    pub integrated_se: Vec<Option<f64>>,
}

impl MeanCurve {
    pub fn at(&self, t: f64) -> f64 {
        interpolate(&self.times, &self.mean, t)
    }

    pub fn se_at(&self, t: f64) -> f64 {
        let se: Vec<f64> = self.se.iter().map(|s| s.unwrap_or(0.0)).collect();
        interpolate(&self.times, &se, t)
    }

    /// `sqrt(se_mean^2 + se_integrated^2)` at node `i`.
    pub fn combined_se(&self, i: usize) -> f64 {
        let a = self.se[i].unwrap_or(0.0);
        let b = self.integrated_se[i].unwrap_or(0.0);
        a.hypot(b)
    }
}

pub fn mean_constraint_curve(spec: &ProblemSpec, ensemble: &PathEnsemble) -> Result<MeanCurve> {
    let table = integrand_table(spec, ensemble)?;
    let grid = ensemble.grid();
    let dt = grid.dt();
    let phi0 = spec.phi_at(&spec.x0);
    let mut mean = Vec::with_capacity(grid.nodes());
    let mut se = Vec::with_capacity(grid.nodes());
    let mut integrated_mean = Vec::with_capacity(grid.nodes());
    let mut integrated_se = Vec::with_capacity(grid.nodes());
    let mut running = vec![phi0; table.len()];
    let mut column = vec![0.0; table.len()];
    for node in 0..grid.nodes() {
        if node > 0 {
            for (r, row) in running.iter_mut().zip(&table) {
                *r += 0.5 * dt * (row[node - 1] + row[node]);
            }
        }
        for (c, p) in column.iter_mut().zip(ensemble.valid_paths()) {
            *c = spec.phi_at(ensemble.state(p, node));
        }
        let s = MeanSe::of(&column);
        if !s.mean.is_finite() {
            return Err(Error::NonFiniteCurve(grid.time(node)));
        }
        mean.push(s.mean);
        se.push(s.se);
        let s = MeanSe::of(&running);
        integrated_mean.push(s.mean);
        integrated_se.push(s.se);
    }
    Ok(MeanCurve { times: (0..grid.nodes()).map(|i| grid.time(i)).collect(), mean, se, integrated_mean, integrated_se })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TerminalCase {
    /// `tau < T`.
    #[serde(rename = "i")]
    Interior,
    /// First crossing exactly at `T`.
    #[serde(rename = "ii")]
    AtHorizon,
    /// The constraint set is empty; `tau = T` by the cap.
    #[serde(rename = "iii")]
    NoCrossing,
}

impl TerminalCase {
    pub fn tag(self) -> &'static str {
        match self {
            TerminalCase::Interior => "i",
            TerminalCase::AtHorizon => "ii",
            TerminalCase::NoCrossing => "iii",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalTimeEstimate {
    pub tau: f64,
    pub case: TerminalCase,
    /// Standard error of the crossing time (curve SE over slope).
    pub crossing_se: Option<f64>,
    pub curve_at_tau: f64,
    /// `|curve(T) - alpha|`.
    pub margin: f64,
    pub se_at_horizon: f64,
    /// Curve tolerance band used for the boundary decisions.
    pub delta: f64,
    /// Time tolerance (one grid step).
    pub delta_t: f64,
    /// The curve touched `alpha - delta` without reaching `alpha`.
    pub graze: bool,
}

/// First time the mean curve reaches `alpha`, capped at `T`.
///
/// The crossing is located on the node scan and refined by linear
/// interpolation inside the bracketing step. A crossing within one step of
/// `T` (on either side, using the last step's slope past `T`) is case (ii);
/// no node within `delta = max(3 SE(T), 1e-9 |alpha|)` of `alpha` is
/// case (iii).
pub fn hitting_time(curve: &MeanCurve, alpha: f64, horizon: f64) -> Result<TerminalTimeEstimate> {
    if let Some(i) = curve.mean.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteCurve(curve.times[i]));
    }
    let n = curve.mean.len();
    let dt = curve.times[1] - curve.times[0];
    let se_at_horizon = curve.se[n - 1].unwrap_or(0.0);
    let delta = (3.0 * se_at_horizon).max(1e-9 * alpha.abs());
    let margin = (curve.mean[n - 1] - alpha).abs();
    let mut est = TerminalTimeEstimate {
        tau: horizon,
        case: TerminalCase::NoCrossing,
        crossing_se: None,
        curve_at_tau: curve.mean[n - 1],
        margin,
        se_at_horizon,
        delta,
        delta_t: dt,
        graze: false,
    };
    let crossing_se = |i: usize, slope: f64| {
        let se = curve.se[i].unwrap_or(0.0);
        if slope.abs() > 0.0 {
            Some(se / slope.abs())
        } else {
            None
        }
    };

    if let Some(i) = curve.mean.iter().position(|v| *v >= alpha) {
        if i == 0 {
            est.tau = curve.times[0];
            est.case = TerminalCase::Interior;
            est.curve_at_tau = curve.mean[0];
            return Ok(est);
        }
        let (c0, c1) = (curve.mean[i - 1], curve.mean[i]);
        let theta = ((alpha - c0) / (c1 - c0)).clamp(0.0, 1.0);
        est.tau = curve.times[i - 1] + theta * (curve.times[i] - curve.times[i - 1]);
        est.curve_at_tau = c0 + theta * (c1 - c0);
        est.crossing_se = crossing_se(i, (c1 - c0) / dt);
        est.case = if horizon - est.tau <= dt { TerminalCase::AtHorizon } else { TerminalCase::Interior };
        return Ok(est);
    }

    let slope = (curve.mean[n - 1] - curve.mean[n - 2]) / dt;
    let beyond = if slope > 0.0 { (alpha - curve.mean[n - 1]) / slope } else { f64::INFINITY };
    if curve.mean[n - 1] >= alpha - delta || beyond <= dt {
        est.case = TerminalCase::AtHorizon;
        est.crossing_se = crossing_se(n - 1, slope);
        return Ok(est);
    }
    if let Some(i) = curve.mean.iter().position(|v| *v >= alpha - delta) {
        est.tau = curve.times[i];
        est.case = TerminalCase::Interior;
        est.curve_at_tau = curve.mean[i];
        est.graze = true;
    }
    Ok(est)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseDiagnostics {
    pub case: TerminalCase,
    pub margin: f64,
    pub se_at_horizon: f64,
    pub h_at_tau: f64,
    pub graze: bool,
}

/// Confirms the case tag and checks the `h(tau) != 0` hypothesis for the
/// crossing cases.
pub fn classify_case(estimate: &TerminalTimeEstimate, rate: &ConstraintRate) -> Result<CaseDiagnostics> {
    let h = rate.at(estimate.tau);
    if estimate.case != TerminalCase::NoCrossing && !(h.abs() >= H_MIN) {
        return Err(Error::DegenerateRate(h.abs()));
    }
    Ok(CaseDiagnostics {
        case: estimate.case,
        margin: estimate.margin,
        se_at_horizon: estimate.se_at_horizon,
        h_at_tau: h,
        graze: estimate.graze,
    })
}

/// Everything derived from one simulated control: the ensemble, the mean
/// curve, the constraint rate and the located terminal time.
#[derive(Debug, Clone)]
pub struct TerminalAnalysis {
    pub ensemble: PathEnsemble,
    pub curve: MeanCurve,
    pub rate: ConstraintRate,
    pub estimate: TerminalTimeEstimate,
}

impl TerminalAnalysis {
    pub fn tau(&self) -> f64 {
        self.estimate.tau
    }

    pub fn case(&self) -> TerminalCase {
        self.estimate.case
    }

    /// `h` at the terminal time.
    pub fn h_at_tau(&self) -> f64 {
        self.rate.at(self.estimate.tau)
    }
}

/// Simulates `control` and locates its terminal time.
pub fn analyze(spec: &ProblemSpec, control: &ControlProcess, n_paths: usize, seed: u64) -> Result<TerminalAnalysis> {
    let ensemble = simulate_ensemble(spec, control, n_paths, seed)?;
    analyze_ensemble(spec, ensemble)
}

pub fn analyze_ensemble(spec: &ProblemSpec, ensemble: PathEnsemble) -> Result<TerminalAnalysis> {
    let curve = mean_constraint_curve(spec, &ensemble)?;
    let rate = constraint_rate(spec, &ensemble)?;
    let estimate = hitting_time(&curve, spec.alpha, spec.horizon)?;
    Ok(TerminalAnalysis { ensemble, curve, rate, estimate })
}

/// CSV `t, mean_phi, se, integrated, integrated_se, h, h_se`.
pub fn write_curve_csv(path: &Path, curve: &MeanCurve, rate: &ConstraintRate) -> Result<()> {
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    let rows = (0..curve.times.len()).map(|i| {
        vec![
            fmt_f64(curve.times[i]),
            fmt_f64(curve.mean[i]),
            opt(curve.se[i]),
            fmt_f64(curve.integrated_mean[i]),
            opt(curve.integrated_se[i]),
            fmt_f64(rate.values[i]),
            opt(rate.se[i]),
        ]
    });
    write_csv(path, &["t", "mean_phi", "se", "integrated", "integrated_se", "h", "h_se"], rows)
}

/// Terminal-time report `{tau, case, se, margin, ...}`.
pub fn terminal_json(estimate: &TerminalTimeEstimate, h_at_tau: f64) -> Value {
    json!({
        "tau": num(estimate.tau),
        "case": estimate.case.tag(),
        "se": opt_num(estimate.crossing_se),
        "margin": num(estimate.margin),
        "curve_at_tau": num(estimate.curve_at_tau),
        "se_at_horizon": num(estimate.se_at_horizon),
        "h_at_tau": num(h_at_tau),
        "graze": estimate.graze,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{load_problem, ControlDomain, ProblemSource};
    use crate::simulate::TimeGrid;
    use proptest::prelude::*;
    use std::f64::consts::{E, LN_2};

    fn run(spec: &ProblemSpec, n: usize, paths: usize, u: f64) -> PathEnsemble {
        let grid = TimeGrid::new(spec.horizon, n).unwrap();
        simulate_ensemble(spec, &ControlProcess::constant(grid, &[u]), paths, 17).unwrap()
    }

    #[test]
    fn example2_rate_is_exactly_one() {
        let spec = load_problem("example2").unwrap();
        let ens = run(&spec, 20, 200, 2.0);
        let h = constraint_rate(&spec, &ens).unwrap();
        assert!(h.values.iter().all(|v| *v == 1.0));
        assert!(h.se.iter().all(|s| *s == Some(0.0)));
    }

    #[test]
    fn example1_rate_matches_exponential() {
        let spec = load_problem("example1").unwrap();
        let ens = run(&spec, 100_000, 1, 1.0);
        let h = constraint_rate(&spec, &ens).unwrap();
        assert!((h.at(LN_2) - 2.0).abs() <= 2e-4);
    }

    #[test]
    fn constant_phi_has_zero_rate() {
        let spec = ProblemSpec::build(ProblemSource {
            name: "flat",
            state_dim: 1,
            noise_dim: 1,
            x0: vec![0.0],
            horizon: 1.0,
            alpha: 1.0,
            domain: ControlDomain::finite(vec![vec![1.0]]).unwrap(),
            seed: None,
            b: "x + u",
            sigma: "0.2",
            f: "u",
            g: "0",
            phi: "0.5",
        })
        .unwrap();
        let ens = run(&spec, 10, 20, 1.0);
        let h = constraint_rate(&spec, &ens).unwrap();
        assert!(h.values.iter().all(|v| *v == 0.0));
        let curve = mean_constraint_curve(&spec, &ens).unwrap();
        assert!(curve.mean.iter().all(|v| *v == 0.5));
        let est = hitting_time(&curve, spec.alpha, spec.horizon).unwrap();
        assert_eq!(est.case, TerminalCase::NoCrossing);
        assert!(classify_case(&est, &h).is_ok());
    }

    #[test]
    fn example1_terminal_time() {
        let spec = load_problem("example1").unwrap();
        let ens = run(&spec, 100_000, 1, 1.0);
        let curve = mean_constraint_curve(&spec, &ens).unwrap();
        let est = hitting_time(&curve, spec.alpha, spec.horizon).unwrap();
        assert!((est.tau - LN_2).abs() <= 1e-4, "tau = {}", est.tau);
        assert_eq!(est.case, TerminalCase::Interior);
        assert!((curve.at(0.5) - (0.5f64.exp() - 1.0)).abs() < 1e-5);
        let h = constraint_rate(&spec, &ens).unwrap();
        assert_eq!(classify_case(&est, &h).unwrap().case, TerminalCase::Interior);
    }

    #[test]
    fn example1_boundary_cases() {
        let spec = load_problem("example1").unwrap();
        let at_t = spec.with_alpha(E - 1.0).unwrap();
        let ens = run(&at_t, 1000, 1, 1.0);
        let curve = mean_constraint_curve(&at_t, &ens).unwrap();
        let est = hitting_time(&curve, at_t.alpha, at_t.horizon).unwrap();
        assert_eq!(est.case, TerminalCase::AtHorizon);
        assert!((est.tau - 1.0).abs() <= est.delta_t);

        let high = spec.with_alpha(3.0).unwrap();
        let curve = mean_constraint_curve(&high, &ens).unwrap();
        let est = hitting_time(&curve, high.alpha, high.horizon).unwrap();
        assert_eq!(est.case, TerminalCase::NoCrossing);
        assert_eq!(est.tau, 1.0);
    }

    #[test]
    fn example2_terminal_time() {
        let spec = load_problem("example2").unwrap();
        let ens = run(&spec, 100, 100_000, 1.0);
        let curve = mean_constraint_curve(&spec, &ens).unwrap();
        for (i, t) in curve.times.iter().enumerate() {
            assert!((curve.mean[i] - (0.5 + t)).abs() <= 3.0 * curve.se[i].unwrap() + 1e-12);
        }
        let est = hitting_time(&curve, spec.alpha, spec.horizon).unwrap();
        assert!((est.tau - 0.5).abs() <= 0.01, "tau = {}", est.tau);
        assert_eq!(est.case, TerminalCase::Interior);
    }

    #[test]
    fn degenerate_rate_is_an_error() {
        let curve = MeanCurve {
            times: vec![0.0, 0.5, 1.0],
            mean: vec![0.0, 1.0, 1.0],
            se: vec![None; 3],
            integrated_mean: vec![0.0; 3],
            integrated_se: vec![None; 3],
        };
        let est = hitting_time(&curve, 1.0, 1.0).unwrap();
        let rate = ConstraintRate { times: curve.times.clone(), values: vec![0.0; 3], se: vec![None; 3] };
        assert!(matches!(classify_case(&est, &rate), Err(Error::DegenerateRate(_))));
    }

    #[test]
    fn graze_is_flagged() {
        let curve = MeanCurve {
            times: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            mean: vec![0.0, 0.9, 0.99, 0.9, 0.8],
            se: vec![Some(0.0), Some(0.01), Some(0.01), Some(0.01), Some(0.01)],
            integrated_mean: vec![0.0; 5],
            integrated_se: vec![None; 5],
        };
        let est = hitting_time(&curve, 1.0, 1.0).unwrap();
        assert!(est.graze);
        assert_eq!(est.case, TerminalCase::Interior);
        assert_eq!(est.tau, 0.5);
    }

    #[test]
    fn non_finite_curve_is_an_error() {
        let curve = MeanCurve {
            times: vec![0.0, 0.5, 1.0],
            mean: vec![0.0, f64::NAN, 1.0],
            se: vec![None; 3],
            integrated_mean: vec![0.0; 3],
            integrated_se: vec![None; 3],
        };
        assert!(hitting_time(&curve, 1.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn tau_is_monotone_in_alpha(
            increments in proptest::collection::vec(-0.2f64..1.0, 10),
            a1 in 0.01f64..3.0,
            a2 in 0.01f64..3.0,
        ) {
            let mut mean = vec![0.0];
            for d in &increments {
                mean.push(mean.last().unwrap() + d * 0.1);
            }
            let n = mean.len();
            let curve = MeanCurve {
                times: (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
                mean,
                se: vec![Some(0.0); n],
                integrated_mean: vec![0.0; n],
                integrated_se: vec![None; n],
            };
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            let t_lo = hitting_time(&curve, lo, 1.0).unwrap();
            let t_hi = hitting_time(&curve, hi, 1.0).unwrap();
            prop_assert!(t_lo.tau >= 0.0 && t_lo.tau <= 1.0);
            if !t_lo.graze && !t_hi.graze {
                prop_assert!(t_hi.tau >= t_lo.tau);
            }
        }
    }
}
