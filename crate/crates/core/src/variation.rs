//! Variational equations for a spike perturbation, their moment bounds,
//! and the terminal-time rate under the spike.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::adjoint::{k_tau, AdjointSolution, SecondOrderAdjoint};
use crate::error::{Error, Result};
use crate::model::ProblemSpec;
use crate::report::{fmt_f64, num, opt_num, write_csv};
use crate::simulate::{euler_path, ControlProcess, PathEnsemble, Workspace};
use crate::stats::{linear_fit, MeanSe};
use crate::terminal::{analyze, TerminalAnalysis, TerminalCase, H_MIN};

/// Paths per partial sum; fixes the reduction tree independently of the
/// worker count.
const CHUNK: usize = 512;

/// First- and second-order responses `y1`, `y2` of the state to a spike.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalPair {
    pub spiked: ControlProcess,
    pub state_dim: usize,
    pub nodes: usize,
    pub seed: u64,
    /// `[path][node][m]`.
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
}

impl VariationalPair {
    pub fn y1(&self, path: usize, node: usize) -> &[f64] {
        let m = self.state_dim;
        let off = (path * self.nodes + node) * m;
        &self.y1[off..off + m]
    }

    pub fn y2(&self, path: usize, node: usize) -> &[f64] {
        let m = self.state_dim;
        let off = (path * self.nodes + node) * m;
        &self.y2[off..off + m]
    }
}

/// Coefficient data at `(x, u)` used by the variational drivers.
struct Linearization {
    b: Vec<f64>,
    bx: Vec<f64>,
    bxx: Vec<f64>,
    s: Vec<f64>,
    sx: Vec<f64>,
    sxx: Vec<f64>,
}

impl Linearization {
    fn at(spec: &ProblemSpec, ws: &Workspace, second: bool) -> Self {
        let pt = &ws.point;
        let det = spec.is_deterministic();
        let zero_s = |n: usize| vec![0.0; n];
        let (m, d) = (spec.state_dim, spec.noise_dim);
        Linearization {
            b: spec.b.value.eval(pt),
            bx: spec.b.dx.eval(pt),
            bxx: if second { spec.b.dxx.eval(pt) } else { Vec::new() },
            s: if det { zero_s(m * d) } else { spec.sigma.value.eval(pt) },
            sx: if det { zero_s(m * d * m) } else { spec.sigma.dx.eval(pt) },
            sxx: if second && !det { spec.sigma.dxx.eval(pt) } else { zero_s(m * d * m * m) },
        }
    }
}

/// Euler scheme for `(y1, y2)` along one candidate path.
fn variational_path(
    spec: &ProblemSpec,
    xbar: &[f64],
    spiked: &ControlProcess,
    incs: &[f64],
    y1: &mut [f64],
    y2: &mut [f64],
) {
    let (m, d) = (spec.state_dim, spec.noise_dim);
    let grid = spiked.grid();
    let dt = grid.dt();
    y1.iter_mut().chain(y2.iter_mut()).for_each(|v| *v = 0.0);
    let Some(spike) = spiked.spike() else { return };
    let mut ws = Workspace::new(spec);
    let mut drift1 = vec![0.0; m];
    let mut drift2 = vec![0.0; m];
    let mut diff1 = vec![0.0; m * d];
    let mut diff2 = vec![0.0; m * d];
    for step in spike.start_step..grid.steps() {
        let x = &xbar[step * m..(step + 1) * m];
        let (h1, t1) = y1.split_at_mut((step + 1) * m);
        let (h2, t2) = y2.split_at_mut((step + 1) * m);
        let (a1, a2) = (&h1[step * m..], &h2[step * m..]);
        ws.set(x, spiked.base_at_step(step));
        let base = Linearization::at(spec, &ws, true);
        for i in 0..m {
            let mut v1 = 0.0;
            let mut v2 = 0.0;
            for a in 0..m {
                v1 += base.bx[i * m + a] * a1[a];
                v2 += base.bx[i * m + a] * a2[a];
                for c in 0..m {
                    v2 += 0.5 * base.bxx[(i * m + a) * m + c] * a1[a] * a1[c];
                }
            }
            drift1[i] = v1;
            drift2[i] = v2;
            for j in 0..d {
                let mut w1 = 0.0;
                let mut w2 = 0.0;
                for a in 0..m {
                    let sx = base.sx[(i * d + j) * m + a];
                    w1 += sx * a1[a];
                    w2 += sx * a2[a];
                    for c in 0..m {
                        w2 += 0.5 * base.sxx[((i * d + j) * m + a) * m + c] * a1[a] * a1[c];
                    }
                }
                diff1[i * d + j] = w1;
                diff2[i * d + j] = w2;
            }
        }
        if spike.covers(step) {
            ws.set(x, &spike.value);
            let moved = Linearization::at(spec, &ws, false);
            for i in 0..m {
                drift1[i] += moved.b[i] - base.b[i];
                for a in 0..m {
                    drift2[i] += (moved.bx[i * m + a] - base.bx[i * m + a]) * a1[a];
                }
                for j in 0..d {
                    diff1[i * d + j] += moved.s[i * d + j] - base.s[i * d + j];
                    for a in 0..m {
                        let k = (i * d + j) * m + a;
                        diff2[i * d + j] += (moved.sx[k] - base.sx[k]) * a1[a];
                    }
                }
            }
        }
        let dw = &incs[step * d..(step + 1) * d];
        for i in 0..m {
            let mut n1 = 0.0;
            let mut n2 = 0.0;
            for j in 0..d {
                n1 += diff1[i * d + j] * dw[j];
                n2 += diff2[i * d + j] * dw[j];
            }
            t1[i] = a1[i] + drift1[i] * dt + n1;
            t2[i] = a2[i] + drift2[i] * dt + n2;
        }
    }
}

/// Integrates the variational equations along every path of `base`, which
/// must have been simulated under the un-spiked version of `spiked`.
pub fn solve_variational(spec: &ProblemSpec, base: &PathEnsemble, spiked: &ControlProcess) -> Result<VariationalPair> {
    check_pairing(base, spiked)?;
    let m = spec.state_dim;
    let nodes = base.grid().nodes();
    let len = nodes * m;
    let np = base.n_paths();
    let mut y1 = vec![0.0; np * len];
    let mut y2 = vec![0.0; np * len];
    y1.par_chunks_mut(len).zip(y2.par_chunks_mut(len)).enumerate().for_each(|(p, (a, b))| {
        variational_path(spec, base.path(p), spiked, &base.increments(p), a, b);
    });
    Ok(VariationalPair { spiked: spiked.clone(), state_dim: m, nodes, seed: base.seed(), y1, y2 })
}

fn check_pairing(base: &PathEnsemble, spiked: &ControlProcess) -> Result<()> {
    if base.control().spike().is_some() || spiked.without_spike() != *base.control() {
        return Err(Error::Config("spiked control must overlay the base ensemble's control".into()));
    }
    Ok(())
}

/// Normalized moment ratios for one spike width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentRow {
    pub epsilon: f64,
    /// Width after snapping to the grid; used for normalization.
    pub effective_epsilon: f64,
    /// `eps^-2 sup E|X^eps - X - y1 - y2|^2`.
    pub remainder: f64,
    /// `eps^-1 sup E|y1|^2`.
    pub y1_sq: f64,
    /// `eps^-2 sup E|y2|^2`.
    pub y2_sq: f64,
    /// `eps^-2 sup E|y1|^4`.
    pub y1_quart: f64,
    /// `eps^-4 sup E|y2|^4`.
    pub y2_quart: f64,
}

impl MomentRow {
    pub fn ratios(&self) -> [f64; 5] {
        [self.remainder, self.y1_sq, self.y2_sq, self.y1_quart, self.y2_quart]
    }
}

pub const MOMENT_NAMES: [&str; 5] = ["remainder", "y1_sq", "y2_sq", "y1_quart", "y2_quart"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentTable {
    pub rows: Vec<MomentRow>,
}

impl MomentTable {
    /// Each ratio at the next (halved) width stays within `1.5 max(prev, 1e-8)`.
    pub fn bounded(&self) -> bool {
        self.rows.windows(2).all(|w| {
            w[0].ratios().iter().zip(w[1].ratios()).all(|(a, b)| b <= 1.5 * a.max(1e-8))
        })
    }
}

/// Sums over nodes of the five moment integrands for one path: entry
/// `node * 5 + k`.
fn path_moments(
    spec: &ProblemSpec,
    base: &PathEnsemble,
    spiked: &ControlProcess,
    path: usize,
    scratch: &mut [Vec<f64>; 3],
    out: &mut [f64],
) {
    let m = spec.state_dim;
    let incs = base.increments(path);
    let [xe, y1, y2] = scratch;
    euler_path(spec, spiked, &incs, xe);
    variational_path(spec, base.path(path), spiked, &incs, y1, y2);
    let xbar = base.path(path);
    for node in 0..base.grid().nodes() {
        let r = node * m..(node + 1) * m;
        let sq = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
        let rem: f64 = (0..m)
            .map(|i| {
                let k = node * m + i;
                let e = xe[k] - xbar[k] - y1[k] - y2[k];
                e * e
            })
            .sum();
        let a = sq(&y1[r.clone()]);
        let b = sq(&y2[r]);
        let o = &mut out[node * 5..(node + 1) * 5];
        o[0] += rem;
        o[1] += a;
        o[2] += b;
        o[3] += a * a;
        o[4] += b * b;
    }
}

/// Empirical moment ratios of the variational expansion over an
/// `eps` ladder, all under common random numbers with `base`.
pub fn moment_check(spec: &ProblemSpec, base: &PathEnsemble, u: &[f64], tau: f64, ladder: &[f64]) -> Result<MomentTable> {
    check_ladder(ladder)?;
    let nodes = base.grid().nodes();
    let m = spec.state_dim;
    let valid: Vec<usize> = base.valid_paths().collect();
    let mut rows = Vec::with_capacity(ladder.len());
    for &eps in ladder {
        let spiked = base.control().with_spike(&spec.domain, u, tau, eps)?;
        let partials: Vec<Vec<f64>> = valid
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut acc = vec![0.0; nodes * 5];
                let mut scratch = [vec![0.0; nodes * m], vec![0.0; nodes * m], vec![0.0; nodes * m]];
                for &p in chunk {
                    path_moments(spec, base, &spiked, p, &mut scratch, &mut acc);
                }
                acc
            })
            .collect();
        let mut total = vec![0.0; nodes * 5];
        for part in &partials {
            total.iter_mut().zip(part).for_each(|(a, b)| *a += b);
        }
        let n = valid.len() as f64;
        let mut sup = [0.0f64; 5];
        for node in 0..nodes {
            for k in 0..5 {
                sup[k] = sup[k].max(total[node * 5 + k] / n);
            }
        }
        let e = spiked.spike().map(|s| s.width(base.grid())).unwrap_or(0.0);
        let norm = |v: f64, power: i32| if v == 0.0 { 0.0 } else { v / e.powi(power) };
        rows.push(MomentRow {
            epsilon: eps,
            effective_epsilon: e,
            remainder: norm(sup[0], 2),
            y1_sq: norm(sup[1], 1),
            y2_sq: norm(sup[2], 2),
            y1_quart: norm(sup[3], 2),
            y2_quart: norm(sup[4], 4),
        });
    }
    Ok(MomentTable { rows })
}

fn check_ladder(ladder: &[f64]) -> Result<()> {
    if ladder.is_empty() || ladder.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
        return Err(Error::Config("epsilon ladder must hold positive finite values".into()));
    }
    if ladder.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Config("epsilon ladder must be strictly decreasing".into()));
    }
    Ok(())
}

/// Which limit a spiked run supports in the boundary case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    /// The spiked curve still crosses before `T`.
    Rate,
    /// The spiked curve no longer crosses before `T`.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateEntry {
    pub epsilon: f64,
    pub effective_epsilon: f64,
    pub tau_eps: f64,
    /// `(tau - tau_eps) / eps`.
    pub slope: f64,
    pub branch: Option<Branch>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateEstimate {
    pub case: TerminalCase,
    pub tau_bar: f64,
    pub entries: Vec<RateEntry>,
    /// Intercept of the linear fit of slope against `eps`.
    pub extrapolated: f64,
    /// `|tau - tau_eps|` shrinks along the ladder.
    pub continuity: bool,
}

impl RateEstimate {
    pub fn branch_counts(&self) -> (usize, usize) {
        let count = |b| self.entries.iter().filter(|e| e.branch == Some(b)).count();
        (count(Branch::Rate), count(Branch::Zero))
    }
}

/// Finite-difference terminal-time rate under spikes of value `u` at `tau`
/// over the `eps` ladder, with common random numbers throughout.
pub fn tau_rate_empirical(
    spec: &ProblemSpec,
    candidate: &TerminalAnalysis,
    u: &[f64],
    tau: f64,
    ladder: &[f64],
) -> Result<RateEstimate> {
    check_ladder(ladder)?;
    let ens = &candidate.ensemble;
    let case = candidate.case();
    let tau_bar = candidate.tau();
    if case == TerminalCase::NoCrossing {
        let entries = ladder
            .iter()
            .map(|&e| RateEntry { epsilon: e, effective_epsilon: e, tau_eps: spec.horizon, slope: 0.0, branch: None })
            .collect();
        return Ok(RateEstimate { case, tau_bar, entries, extrapolated: 0.0, continuity: true });
    }
    let h = candidate.h_at_tau();
    if !(h.abs() >= H_MIN) {
        return Err(Error::DegenerateRate(h.abs()));
    }
    let mut entries = Vec::with_capacity(ladder.len());
    for &eps in ladder {
        let spiked = ens.control().with_spike(&spec.domain, u, tau, eps)?;
        let width = spiked.spike().map(|s| s.width(ens.grid())).unwrap_or(0.0);
        let run = analyze(spec, &spiked, ens.n_paths(), ens.seed())?;
        let tau_eps = run.tau();
        let branch = (case == TerminalCase::AtHorizon).then(|| {
            if run.case() == TerminalCase::Interior {
                Branch::Rate
            } else {
                Branch::Zero
            }
        });
        let slope = if width > 0.0 { (tau_bar - tau_eps) / width } else { 0.0 };
        entries.push(RateEntry { epsilon: eps, effective_epsilon: width, tau_eps, slope, branch });
    }
    let xs: Vec<f64> = entries.iter().map(|e| e.effective_epsilon).collect();
    let ys: Vec<f64> = entries.iter().map(|e| e.slope).collect();
    let extrapolated = if entries.len() >= 2 { linear_fit(&xs, &ys).0 } else { ys[0] };
    let gaps: Vec<f64> = entries.iter().map(|e| (tau_bar - e.tau_eps).abs()).collect();
    let continuity = gaps.windows(2).all(|w| w[1] <= w[0] + candidate.estimate.delta_t);
    Ok(RateEstimate { case, tau_bar, entries, extrapolated, continuity })
}

/// `E[k(tau)] / h(tau_bar)` from the constraint adjoints.
pub fn tau_rate_theoretical(
    spec: &ProblemSpec,
    candidate: &TerminalAnalysis,
    first: &AdjointSolution,
    second: &SecondOrderAdjoint,
    tau: f64,
    u: &[f64],
) -> Result<MeanSe> {
    if candidate.case() == TerminalCase::NoCrossing {
        return Ok(MeanSe { mean: 0.0, se: Some(0.0) });
    }
    let h = candidate.h_at_tau();
    if !(h.abs() >= H_MIN) {
        return Err(Error::DegenerateRate(h.abs()));
    }
    let k = k_tau(spec, &candidate.ensemble, tau, u, first, second)?;
    Ok(MeanSe { mean: k.mean / h, se: k.se.map(|s| s / h.abs()) })
}

/// CSV `epsilon, tau_eps, slope, branch`.
pub fn write_rate_csv(path: &Path, rate: &RateEstimate) -> Result<()> {
    let rows = rate.entries.iter().map(|e| {
        let branch = match e.branch {
            Some(Branch::Rate) => "rate",
            Some(Branch::Zero) => "zero",
            None => "",
        };
        vec![fmt_f64(e.effective_epsilon), fmt_f64(e.tau_eps), fmt_f64(e.slope), branch.to_string()]
    });
    write_csv(path, &["epsilon", "tau_eps", "slope", "branch"], rows)
}

/// Rate summary `{empirical_limit, theoretical, abs_diff, ...}`.
pub fn rate_json(rate: &RateEstimate, theoretical: Option<&MeanSe>, driverless: Option<f64>) -> Value {
    let (rate_branch, zero_branch) = rate.branch_counts();
    json!({
        "case": rate.case.tag(),
        "tau_bar": num(rate.tau_bar),
        "empirical_limit": num(rate.extrapolated),
        "theoretical": opt_num(theoretical.map(|t| t.mean)),
        "theoretical_se": opt_num(theoretical.and_then(|t| t.se)),
        "abs_diff": opt_num(theoretical.map(|t| (t.mean - rate.extrapolated).abs())),
        "theoretical_zero_adjoint": opt_num(driverless),
        "continuity": rate.continuity,
        "branches": { "rate": rate_branch, "zero": zero_branch },
        "ladder": rate.entries.iter().map(|e| json!({
            "epsilon": num(e.effective_epsilon),
            "tau_eps": num(e.tau_eps),
            "slope": num(e.slope),
        })).collect::<Vec<_>>(),
    })
}

/// Moment table as JSON rows.
pub fn moments_json(table: &MomentTable) -> Value {
    json!({
        "bounded": table.bounded(),
        "rows": table.rows.iter().map(|r| {
            let mut row = serde_json::Map::new();
            row.insert("epsilon".into(), num(r.effective_epsilon));
            for (name, v) in MOMENT_NAMES.iter().zip(r.ratios()) {
                row.insert((*name).into(), num(v));
            }
            Value::Object(row)
        }).collect::<Vec<_>>(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjoint::{solve_first_adjoint, solve_second_adjoint, AdjointKind, AdjointOptions, Backend};
    use crate::model::{load_problem, ControlDomain, ProblemSource};
    use crate::simulate::{simulate_ensemble, TimeGrid};
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn base(spec: &ProblemSpec, steps: usize, paths: usize, seed: u64) -> PathEnsemble {
        let grid = TimeGrid::new(spec.horizon, steps).unwrap();
        simulate_ensemble(spec, &ControlProcess::constant(grid, &[1.0]), paths, seed).unwrap()
    }

    #[test]
    fn degenerate_spike_gives_zero_response() {
        let spec = load_problem("example2").unwrap();
        let ens = base(&spec, 100, 50, 1);
        let spiked = ens.control().with_spike(&spec.domain, &[1.0], 0.2, 0.05).unwrap();
        let pair = solve_variational(&spec, &ens, &spiked).unwrap();
        assert!(pair.y1.iter().chain(&pair.y2).all(|v| *v == 0.0));
        let table = moment_check(&spec, &ens, &[1.0], 0.2, &[0.1, 0.05]).unwrap();
        assert!(table.rows.iter().all(|r| r.ratios().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn example1_first_variation_is_exponential() {
        let spec = load_problem("example1").unwrap();
        let ens = base(&spec, 100_000, 1, 1);
        let eps = 1e-3;
        let spiked = ens.control().with_spike(&spec.domain, &[2.0], 0.3, eps).unwrap();
        let pair = solve_variational(&spec, &ens, &spiked).unwrap();
        assert_eq!(pair.y1(0, 0), &[0.0]);
        let t: f64 = 0.8;
        let node = ens.grid().nearest_node(t);
        let exact = (t - 0.3).exp() * (1.0 - (-eps).exp());
        assert!((pair.y1(0, node)[0] - exact).abs() < 1e-4 * exact);
        assert!(pair.y2.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn example1_expansion_is_exact() {
        let spec = load_problem("example1").unwrap();
        let ens = base(&spec, 1000, 1, 1);
        let table = moment_check(&spec, &ens, &[2.0], 0.3, &[0.1, 0.05, 0.025]).unwrap();
        for row in &table.rows {
            assert!(row.remainder < 1e-20, "{row:?}");
        }
    }

    #[test]
    fn example2_variance_matches_isometry() {
        let spec = load_problem("example2").unwrap();
        let ens = base(&spec, 200, 20_000, 5);
        let spiked = ens.control().with_spike(&spec.domain, &[2.0], 0.2, 0.05).unwrap();
        let pair = solve_variational(&spec, &ens, &spiked).unwrap();
        let node = ens.grid().nearest_node(0.5);
        let vals: Vec<f64> = (0..ens.n_paths()).map(|p| pair.y1(p, node)[0]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let sq: Vec<f64> = vals.iter().map(|v| (v - mean).powi(2)).collect();
        let var = MeanSe::of(&sq);
        assert!((var.mean - 0.05).abs() <= 3.0 * var.se.unwrap(), "{var:?}");
    }

    #[test]
    fn example2_moment_ladder_is_bounded() {
        let spec = load_problem("example2").unwrap();
        let ens = base(&spec, 200, 5000, 9);
        let table = moment_check(&spec, &ens, &[2.0], 0.2, &[0.1, 0.05, 0.025]).unwrap();
        assert!(table.bounded(), "{table:?}");
        assert!((table.rows[0].y1_sq - 1.0).abs() < 0.1);
    }

    #[test]
    fn ladder_validation() {
        let spec = load_problem("example2").unwrap();
        let ens = base(&spec, 20, 10, 1);
        assert!(moment_check(&spec, &ens, &[2.0], 0.2, &[0.05, 0.1]).is_err());
        assert!(moment_check(&spec, &ens, &[2.0], 0.2, &[]).is_err());
        assert!(moment_check(&spec, &ens, &[2.0], 0.2, &[0.1, -0.1]).is_err());
    }

    #[test]
    fn example1_rate_matches_closed_form_and_adjoint() {
        let spec = load_problem("example1").unwrap();
        let grid = TimeGrid::new(1.0, 100_000).unwrap();
        let cand = analyze(&spec, &ControlProcess::constant(grid, &[1.0]), 1, 3).unwrap();
        let rate = tau_rate_empirical(&spec, &cand, &[2.0], 0.3, &[0.02, 0.01, 0.005]).unwrap();
        let exact = (-0.3f64).exp();
        assert!((rate.extrapolated - exact).abs() < 2e-3, "{}", rate.extrapolated);
        for e in &rate.entries {
            let t = 0.3;
            let tau_eps = t + e.effective_epsilon + LN_2 - ((t.exp() + 1.0) * e.effective_epsilon.exp() - 1.0).ln();
            assert!((e.tau_eps - tau_eps).abs() < 1e-4);
        }
        let opts = AdjointOptions { backend: Backend::Ode, degree: 3 };
        let p0 = solve_first_adjoint(&spec, &cand.ensemble, cand.tau(), AdjointKind::Constraint, opts).unwrap();
        let big_p0 = solve_second_adjoint(&spec, &cand.ensemble, &p0, opts).unwrap();
        let theory = tau_rate_theoretical(&spec, &cand, &p0, &big_p0, 0.3, &[2.0]).unwrap();
        assert!((theory.mean - exact).abs() < 2e-3);
        assert_eq!(tau_rate_theoretical(&spec, &cand, &p0, &big_p0, 0.3, &[1.0]).unwrap().mean, 0.0);
    }

    #[test]
    fn case_three_rate_is_zero() {
        let spec = load_problem("example1").unwrap().with_alpha(3.0).unwrap();
        let grid = TimeGrid::new(1.0, 1000).unwrap();
        let cand = analyze(&spec, &ControlProcess::constant(grid, &[1.0]), 1, 3).unwrap();
        let rate = tau_rate_empirical(&spec, &cand, &[2.0], 0.3, &[0.02, 0.01]).unwrap();
        assert_eq!(rate.extrapolated, 0.0);
        assert!(rate.entries.iter().all(|e| e.tau_eps == 1.0 && e.slope == 0.0));
    }

    #[test]
    fn rate_json_is_complete() {
        let spec = load_problem("example1").unwrap();
        let grid = TimeGrid::new(1.0, 2000).unwrap();
        let cand = analyze(&spec, &ControlProcess::constant(grid, &[1.0]), 1, 3).unwrap();
        let rate = tau_rate_empirical(&spec, &cand, &[2.0], 0.3, &[0.02, 0.01]).unwrap();
        let v = rate_json(&rate, Some(&MeanSe { mean: 0.74, se: None }), Some(0.5));
        for key in ["empirical_limit", "theoretical", "abs_diff", "ladder"] {
            assert!(v.get(key).is_some());
        }
        let dir = tempfile::tempdir().unwrap();
        write_rate_csv(&dir.path().join("r.csv"), &rate).unwrap();
        let text = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert!(text.starts_with("epsilon,tau_eps,slope,branch\n"));
    }

    fn linear_problem() -> ProblemSpec {
        ProblemSpec::build(ProblemSource {
            name: "linear",
            state_dim: 1,
            noise_dim: 1,
            x0: vec![0.0],
            horizon: 1.0,
            alpha: 1.0,
            domain: ControlDomain::finite(vec![vec![1.0], vec![2.0], vec![3.0]]).unwrap(),
            seed: None,
            b: "0.5*x + u",
            sigma: "0.3*x + 0.5*u",
            f: "u",
            g: "0",
            phi: "x",
        })
        .unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn first_variation_is_linear_in_the_spike(tau in 0.05f64..0.8, seed in 0u64..1000) {
            let spec = linear_problem();
            let ens = base(&spec, 200, 8, seed);
            let one = ens.control().with_spike(&spec.domain, &[2.0], tau, 0.05).unwrap();
            let two = ens.control().with_spike(&spec.domain, &[3.0], tau, 0.05).unwrap();
            let a = solve_variational(&spec, &ens, &one).unwrap();
            let b = solve_variational(&spec, &ens, &two).unwrap();
            for (x, y) in a.y1.iter().zip(&b.y1) {
                prop_assert!((2.0 * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }
}
