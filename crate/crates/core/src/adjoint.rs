//! First- and second-order adjoint equations, Hamiltonians, the
//! terminal-time sensitivity kernel `k` and the correction term `R`.
//!
//! All four backward systems live on `[0, tau]`: the simulation nodes
//! strictly before `tau` followed by a final node at `tau` itself, where the
//! terminal data is imposed exactly.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ProblemSpec;
use crate::regression::{project, PolynomialBasis};
use crate::report::{fmt_f64, write_csv};
use crate::simulate::{PathEnsemble, Workspace};
use crate::stats::MeanSe;

/// Cost side (terminal data `g_x`, `g_xx`, running term `f`) or constraint
/// side (zero terminal data, running term `l`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AdjointKind {
    Cost,
    Constraint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    /// Backward Heun integration of the (mean) linear ODE; `K = Q = 0`.
    Ode,
    /// Least-squares Monte Carlo projection of the discrete BSDE.
    Regression,
}

impl Backend {
    /// ODE backend when the problem admits it, regression otherwise.
    pub fn auto(spec: &ProblemSpec) -> Backend {
        if ode_admissible(spec) {
            Backend::Ode
        } else {
            Backend::Regression
        }
    }
}

/// The ODE backend is exact when there is no noise, and gives the mean
/// adjoint when `sigma_x = 0` and `b` is affine in the state.
pub fn ode_admissible(spec: &ProblemSpec) -> bool {
    spec.is_deterministic() || (spec.sigma.dx.is_identically_zero() && spec.b.dxx.is_identically_zero())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjointOptions {
    pub backend: Backend,
    /// Total degree of the regression basis.
    pub degree: u8,
}

impl Default for AdjointOptions {
    fn default() -> Self {
        AdjointOptions { backend: Backend::Ode, degree: 3 }
    }
}

/// Time nodes of the adjoint grid and the data needed to sample the
/// candidate trajectory on them.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointGrid {
    pub times: Vec<f64>,
    /// Control step in force on `[t_i, t_{i+1})`; the last node reuses the
    /// previous step (left limit at `tau`).
    steps: Vec<usize>,
    /// Length of the last step relative to the simulation step.
    last_fraction: f64,
    tau: f64,
}

impl AdjointGrid {
    pub fn new(ensemble: &PathEnsemble, tau: f64) -> Result<Self> {
        let grid = ensemble.grid();
        if !(tau > 0.0) || tau > grid.horizon() * (1.0 + 1e-12) {
            return Err(Error::Config(format!("adjoint horizon {tau} outside (0, T]")));
        }
        let tau = tau.min(grid.horizon());
        let dt = grid.dt();
        let full = ((tau / dt) * (1.0 + 1e-12)).floor() as usize;
        let full = full.min(grid.steps());
        let rem = tau - grid.time(full);
        let mut times: Vec<f64> = (0..=full).map(|i| grid.time(i)).collect();
        let mut last_fraction = 1.0;
        if rem > 1e-9 * dt {
            times.push(tau);
            last_fraction = rem / dt;
        } else {
            *times.last_mut().unwrap() = tau;
        }
        if times.len() < 2 {
            return Err(Error::Config("adjoint horizon shorter than one step".into()));
        }
        let n = times.len();
        let mut steps: Vec<usize> = (0..n - 1).map(|i| i.min(grid.steps() - 1)).collect();
        steps.push(steps[n - 2]);
        Ok(AdjointGrid { times, steps, last_fraction, tau })
    }

    pub fn nodes(&self) -> usize {
        self.times.len()
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    fn h(&self, i: usize) -> f64 {
        self.times[i + 1] - self.times[i]
    }

    /// Candidate state of `path` at node `i`.
    fn state(&self, ensemble: &PathEnsemble, path: usize, i: usize) -> Vec<f64> {
        if i + 1 == self.nodes() && self.last_fraction < 1.0 {
            ensemble.state_at(path, self.tau)
        } else {
            ensemble.state(path, i).to_vec()
        }
    }

    /// Brownian increment of `path` over `[t_i, t_{i+1}]`.
    fn increment(&self, incs: &[f64], d: usize, i: usize, out: &mut [f64]) {
        let scale = if i + 2 == self.nodes() { self.last_fraction } else { 1.0 };
        for (o, v) in out.iter_mut().zip(&incs[i * d..(i + 1) * d]) {
            *o = scale * v;
        }
    }

    /// Position of `t` as `(node, weight of node + 1)`.
    fn locate(&self, t: f64) -> (usize, f64) {
        let n = self.nodes();
        if t <= self.times[0] {
            return (0, 0.0);
        }
        if t >= self.times[n - 1] {
            return (n - 2, 1.0);
        }
        let i = self.times.partition_point(|s| *s <= t) - 1;
        let i = i.min(n - 2);
        (i, (t - self.times[i]) / (self.times[i + 1] - self.times[i]))
    }
}

/// First-order adjoint `(p, K)`.
///
/// Storage is path-major; an ODE solution stores one path shared by all.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointSolution {
    pub grid: AdjointGrid,
    pub kind: AdjointKind,
    pub backend: Backend,
    pub state_dim: usize,
    pub noise_dim: usize,
    n_paths: usize,
    p: Vec<f64>,
    /// `K[i * d + j]` pairs state component `i` with noise `j`.
    k: Vec<f64>,
}

impl AdjointSolution {
    /// The identically zero adjoint.
    pub fn zero(grid: AdjointGrid, kind: AdjointKind, m: usize, d: usize) -> Self {
        let n = grid.nodes();
        AdjointSolution {
            grid,
            kind,
            backend: Backend::Ode,
            state_dim: m,
            noise_dim: d,
            n_paths: 1,
            p: vec![0.0; n * m],
            k: vec![0.0; n * m * d],
        }
    }

    pub fn is_shared(&self) -> bool {
        self.n_paths == 1
    }

    fn row(&self, path: usize) -> usize {
        if self.n_paths == 1 {
            0
        } else {
            path
        }
    }

    pub fn p(&self, path: usize, node: usize) -> &[f64] {
        let m = self.state_dim;
        let off = (self.row(path) * self.grid.nodes() + node) * m;
        &self.p[off..off + m]
    }

    pub fn k(&self, path: usize, node: usize) -> &[f64] {
        let md = self.state_dim * self.noise_dim;
        let off = (self.row(path) * self.grid.nodes() + node) * md;
        &self.k[off..off + md]
    }

    /// `(p, K)` of `path` linearly interpolated at `t`.
    pub fn at(&self, path: usize, t: f64) -> (Vec<f64>, Vec<f64>) {
        let (i, w) = self.grid.locate(t);
        (lerp(self.p(path, i), self.p(path, i + 1), w), lerp(self.k(path, i), self.k(path, i + 1), w))
    }

    /// Path average of `p` and `K` at a node.
    pub fn mean(&self, node: usize, paths: &[usize]) -> (Vec<f64>, Vec<f64>) {
        if self.is_shared() {
            return (self.p(0, node).to_vec(), self.k(0, node).to_vec());
        }
        (average(paths, |r| self.p(r, node)), average(paths, |r| self.k(r, node)))
    }
}

/// Second-order adjoint `(P, Q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondOrderAdjoint {
    pub grid: AdjointGrid,
    pub kind: AdjointKind,
    pub backend: Backend,
    pub state_dim: usize,
    pub noise_dim: usize,
    n_paths: usize,
    big_p: Vec<f64>,
    /// `Q[j]` is an `m x m` block per noise component.
    big_q: Vec<f64>,
}

impl SecondOrderAdjoint {
    pub fn zero(grid: AdjointGrid, kind: AdjointKind, m: usize, d: usize) -> Self {
        let n = grid.nodes();
        SecondOrderAdjoint {
            grid,
            kind,
            backend: Backend::Ode,
            state_dim: m,
            noise_dim: d,
            n_paths: 1,
            big_p: vec![0.0; n * m * m],
            big_q: vec![0.0; n * d * m * m],
        }
    }

    pub fn is_shared(&self) -> bool {
        self.n_paths == 1
    }

    fn row(&self, path: usize) -> usize {
        if self.n_paths == 1 {
            0
        } else {
            path
        }
    }

    pub fn p(&self, path: usize, node: usize) -> &[f64] {
        let mm = self.state_dim * self.state_dim;
        let off = (self.row(path) * self.grid.nodes() + node) * mm;
        &self.big_p[off..off + mm]
    }

    pub fn q(&self, path: usize, node: usize) -> &[f64] {
        let size = self.noise_dim * self.state_dim * self.state_dim;
        let off = (self.row(path) * self.grid.nodes() + node) * size;
        &self.big_q[off..off + size]
    }

    pub fn p_at(&self, path: usize, t: f64) -> Vec<f64> {
        let (i, w) = self.grid.locate(t);
        lerp(self.p(path, i), self.p(path, i + 1), w)
    }

    pub fn mean(&self, node: usize, paths: &[usize]) -> Vec<f64> {
        if self.is_shared() {
            return self.p(0, node).to_vec();
        }
        average(paths, |r| self.p(r, node))
    }

    /// Largest `|P_ab - P_ba|` over nodes and paths.
    pub fn asymmetry(&self) -> f64 {
        let m = self.state_dim;
        self.big_p
            .chunks(m * m)
            .flat_map(|blk| (0..m).flat_map(move |a| (0..m).map(move |b| (blk[a * m + b] - blk[b * m + a]).abs())))
            .fold(0.0, f64::max)
    }
}

fn lerp(a: &[f64], b: &[f64], w: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + w * (y - x)).collect()
}

fn average<'a>(paths: &[usize], get: impl Fn(usize) -> &'a [f64]) -> Vec<f64> {
    let mut acc = vec![0.0; get(paths[0]).len()];
    for &r in paths {
        for (a, v) in acc.iter_mut().zip(get(r)) {
            *a += v;
        }
    }
    let n = paths.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Coefficient derivatives at one `(x, u)`.
struct Local {
    bx: Vec<f64>,
    bxx: Vec<f64>,
    sx: Vec<f64>,
    sxx: Vec<f64>,
    run_x: Vec<f64>,
    run_xx: Vec<f64>,
}

impl Local {
    fn new(spec: &ProblemSpec, kind: AdjointKind, ws: &Workspace) -> Self {
        let run = match kind {
            AdjointKind::Cost => &spec.f,
            AdjointKind::Constraint => &spec.l,
        };
        Local {
            bx: spec.b.dx.eval(&ws.point),
            bxx: spec.b.dxx.eval(&ws.point),
            sx: spec.sigma.dx.eval(&ws.point),
            sxx: spec.sigma.dxx.eval(&ws.point),
            run_x: run.dx.eval(&ws.point),
            run_xx: run.dxx.eval(&ws.point),
        }
    }
}

/// First-order driver `b_x' p + sum_j sigma_x^j' K_j + F_x`.
fn first_driver(loc: &Local, p: &[f64], k: &[f64], m: usize, d: usize, out: &mut [f64]) {
    for a in 0..m {
        let mut v = loc.run_x[a];
        for i in 0..m {
            v += loc.bx[i * m + a] * p[i];
            for j in 0..d {
                v += loc.sx[(i * d + j) * m + a] * k[i * d + j];
            }
        }
        out[a] = v;
    }
}

/// `H_xx` at fixed `(u, p, K)`.
fn hessian_h(loc: &Local, p: &[f64], k: &[f64], m: usize, d: usize) -> Vec<f64> {
    let mut h = loc.run_xx.clone();
    for a in 0..m {
        for c in 0..m {
            let mut v = 0.0;
            for i in 0..m {
                v += p[i] * loc.bxx[(i * m + a) * m + c];
                for j in 0..d {
                    v += k[i * d + j] * loc.sxx[((i * d + j) * m + a) * m + c];
                }
            }
            h[a * m + c] += v;
        }
    }
    h
}

/// Second-order driver
/// `b_x' P + P b_x + sum_j (sx_j' P sx_j + sx_j' Q_j + Q_j sx_j) + H_xx`.
fn second_driver(loc: &Local, big_p: &[f64], big_q: &[f64], hxx: &[f64], m: usize, d: usize) -> Vec<f64> {
    let bx = |i: usize, a: usize| loc.bx[i * m + a];
    let sx = |j: usize, i: usize, a: usize| loc.sx[(i * d + j) * m + a];
    let mut out = hxx.to_vec();
    for a in 0..m {
        for c in 0..m {
            let mut v = 0.0;
            for i in 0..m {
                v += bx(i, a) * big_p[i * m + c] + big_p[a * m + i] * bx(i, c);
                for j in 0..d {
                    let q = &big_q[j * m * m..(j + 1) * m * m];
                    v += sx(j, i, a) * q[i * m + c] + q[a * m + i] * sx(j, i, c);
                    for e in 0..m {
                        v += sx(j, i, a) * big_p[i * m + e] * sx(j, e, c);
                    }
                }
            }
            out[a * m + c] += v;
        }
    }
    out
}

fn terminal_first(spec: &ProblemSpec, kind: AdjointKind, x: &[f64]) -> Vec<f64> {
    match kind {
        AdjointKind::Cost => {
            let mut pt = x.to_vec();
            pt.resize(spec.vars.len(), 0.0);
            spec.g.dx.eval(&pt)
        }
        AdjointKind::Constraint => vec![0.0; spec.state_dim],
    }
}

fn terminal_second(spec: &ProblemSpec, kind: AdjointKind, x: &[f64]) -> Vec<f64> {
    match kind {
        AdjointKind::Cost => {
            let mut pt = x.to_vec();
            pt.resize(spec.vars.len(), 0.0);
            spec.g.dxx.eval(&pt)
        }
        AdjointKind::Constraint => vec![0.0; spec.state_dim * spec.state_dim],
    }
}

/// Solves for `(p, K)` along the candidate ensemble on `[0, tau]`.
pub fn solve_first_adjoint(
    spec: &ProblemSpec,
    ensemble: &PathEnsemble,
    tau: f64,
    kind: AdjointKind,
    options: AdjointOptions,
) -> Result<AdjointSolution> {
    let grid = AdjointGrid::new(ensemble, tau)?;
    match options.backend {
        Backend::Ode => first_ode(spec, ensemble, grid, kind),
        Backend::Regression => first_regression(spec, ensemble, grid, kind, options.degree),
    }
}

/// Solves for `(P, Q)`; `first` supplies the `(p, K)` entering `H_xx`.
pub fn solve_second_adjoint(
    spec: &ProblemSpec,
    ensemble: &PathEnsemble,
    first: &AdjointSolution,
    options: AdjointOptions,
) -> Result<SecondOrderAdjoint> {
    match options.backend {
        Backend::Ode => second_ode(spec, ensemble, first),
        Backend::Regression => second_regression(spec, ensemble, first, options.degree),
    }
}

fn require_ode(spec: &ProblemSpec) -> Result<()> {
    if ode_admissible(spec) {
        Ok(())
    } else {
        Err(Error::Backend(
            "the ODE backend needs sigma = 0, or sigma_x = 0 with a state-affine drift".into(),
        ))
    }
}

/// Node-wise path averages of the linearized coefficients.
struct MeanCoefficients {
    bx: Vec<Vec<f64>>,
    run_x: Vec<Vec<f64>>,
    run_xx: Vec<Vec<f64>>,
    bxx: Vec<Vec<f64>>,
    x_terminal: Vec<Vec<f64>>,
}

fn mean_coefficients(spec: &ProblemSpec, ensemble: &PathEnsemble, grid: &AdjointGrid, kind: AdjointKind) -> MeanCoefficients {
    let paths: Vec<usize> = if spec.is_deterministic() {
        vec![ensemble.valid_paths().next().unwrap_or(0)]
    } else {
        ensemble.valid_paths().collect()
    };
    let n = grid.nodes();
    let mut ws = Workspace::new(spec);
    let mut out = MeanCoefficients { bx: vec![], run_x: vec![], run_xx: vec![], bxx: vec![], x_terminal: vec![] };
    for i in 0..n {
        let u = ensemble.control().at_step(grid.steps[i]);
        let mut sums: [Vec<f64>; 4] = Default::default();
        for &p in &paths {
            let x = grid.state(ensemble, p, i);
            ws.set(&x, u);
            let loc = Local::new(spec, kind, &ws);
            for (s, v) in sums.iter_mut().zip([loc.bx, loc.run_x, loc.run_xx, loc.bxx]) {
                if s.is_empty() {
                    *s = v;
                } else {
                    s.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
                }
            }
            if i + 1 == n {
                out.x_terminal.push(x);
            }
        }
        let c = paths.len() as f64;
        let [bx, rx, rxx, bxx] = sums.map(|mut s| {
            s.iter_mut().for_each(|v| *v /= c);
            s
        });
        out.bx.push(bx);
        out.run_x.push(rx);
        out.run_xx.push(rxx);
        out.bxx.push(bxx);
    }
    out
}

fn first_ode(spec: &ProblemSpec, ensemble: &PathEnsemble, grid: AdjointGrid, kind: AdjointKind) -> Result<AdjointSolution> {
    require_ode(spec)?;
    let (m, d) = (spec.state_dim, spec.noise_dim);
    let n = grid.nodes();
    let coef = mean_coefficients(spec, ensemble, &grid, kind);
    let mut terminal = vec![0.0; m];
    for x in &coef.x_terminal {
        terminal.iter_mut().zip(terminal_first(spec, kind, x)).for_each(|(a, b)| *a += b);
    }
    terminal.iter_mut().for_each(|a| *a /= coef.x_terminal.len() as f64);

    let slope = |i: usize, p: &[f64]| -> Vec<f64> {
        (0..m).map(|a| coef.run_x[i][a] + (0..m).map(|r| coef.bx[i][r * m + a] * p[r]).sum::<f64>()).collect()
    };
    let mut p = vec![0.0; n * m];
    p[(n - 1) * m..].copy_from_slice(&terminal);
    for i in (0..n - 1).rev() {
        let h = grid.h(i);
        let next = p[(i + 1) * m..(i + 2) * m].to_vec();
        let s1 = slope(i + 1, &next);
        let pred: Vec<f64> = next.iter().zip(&s1).map(|(y, s)| y + h * s).collect();
        let s2 = slope(i, &pred);
        for a in 0..m {
            p[i * m + a] = next[a] + 0.5 * h * (s1[a] + s2[a]);
        }
    }
    Ok(AdjointSolution { grid, kind, backend: Backend::Ode, state_dim: m, noise_dim: d, n_paths: 1, p, k: vec![0.0; n * m * d] })
}

fn second_ode(spec: &ProblemSpec, ensemble: &PathEnsemble, first: &AdjointSolution) -> Result<SecondOrderAdjoint> {
    require_ode(spec)?;
    let (m, d) = (spec.state_dim, spec.noise_dim);
    let grid = first.grid.clone();
    let n = grid.nodes();
    let kind = first.kind;
    let coef = mean_coefficients(spec, ensemble, &grid, kind);
    let all: Vec<usize> = ensemble.valid_paths().collect();
    let mut terminal = vec![0.0; m * m];
    for x in &coef.x_terminal {
        terminal.iter_mut().zip(terminal_second(spec, kind, x)).for_each(|(a, b)| *a += b);
    }
    terminal.iter_mut().for_each(|a| *a /= coef.x_terminal.len() as f64);

    // H_xx = F_xx + sum_i p_i b_i,xx; the K terms vanish under the backend
    // precondition.
    let hxx: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let (p, _) = first.mean(i, &all);
            (0..m * m)
                .map(|ac| coef.run_xx[i][ac] + (0..m).map(|r| p[r] * coef.bxx[i][r * m * m + ac]).sum::<f64>())
                .collect()
        })
        .collect();
    let slope = |i: usize, big_p: &[f64]| -> Vec<f64> {
        let bx = &coef.bx[i];
        let mut out = hxx[i].clone();
        for a in 0..m {
            for c in 0..m {
                for r in 0..m {
                    out[a * m + c] += bx[r * m + a] * big_p[r * m + c] + big_p[a * m + r] * bx[r * m + c];
                }
            }
        }
        out
    };
    let mm = m * m;
    let mut big_p = vec![0.0; n * mm];
    big_p[(n - 1) * mm..].copy_from_slice(&terminal);
    for i in (0..n - 1).rev() {
        let h = grid.h(i);
        let next = big_p[(i + 1) * mm..(i + 2) * mm].to_vec();
        let s1 = slope(i + 1, &next);
        let pred: Vec<f64> = next.iter().zip(&s1).map(|(y, s)| y + h * s).collect();
        let s2 = slope(i, &pred);
        for a in 0..m {
            for c in a..m {
                let v = next[a * m + c] + 0.25 * h * (s1[a * m + c] + s1[c * m + a] + s2[a * m + c] + s2[c * m + a]);
                big_p[i * mm + a * m + c] = v;
                big_p[i * mm + c * m + a] = v;
            }
        }
    }
    Ok(SecondOrderAdjoint {
        grid,
        kind,
        backend: Backend::Ode,
        state_dim: m,
        noise_dim: d,
        n_paths: 1,
        big_p,
        big_q: vec![0.0; n * d * mm],
    })
}

/// Candidate states and scaled increments on the adjoint grid.
struct Samples {
    /// `[node][path * m]`.
    x: Vec<Vec<f64>>,
    /// `[step][path * d]`.
    dw: Vec<Vec<f64>>,
    rows: Vec<usize>,
}

fn samples(ensemble: &PathEnsemble, grid: &AdjointGrid) -> Samples {
    let (m, d) = (ensemble.state_dim(), ensemble.noise_dim());
    let n = grid.nodes();
    let np = ensemble.n_paths();
    let per_path: Vec<(Vec<f64>, Vec<f64>)> = (0..np)
        .into_par_iter()
        .map(|p| {
            let incs = ensemble.increments(p);
            let mut xs = Vec::with_capacity(n * m);
            let mut dws = vec![0.0; (n - 1) * d];
            for i in 0..n {
                xs.extend(grid.state(ensemble, p, i));
                if i + 1 < n {
                    grid.increment(&incs, d, i, &mut dws[i * d..(i + 1) * d]);
                }
            }
            (xs, dws)
        })
        .collect();
    let mut x = vec![Vec::with_capacity(np * m); n];
    let mut dw = vec![Vec::with_capacity(np * d); n - 1];
    for (xs, dws) in &per_path {
        for i in 0..n {
            x[i].extend_from_slice(&xs[i * m..(i + 1) * m]);
            if i + 1 < n {
                dw[i].extend_from_slice(&dws[i * d..(i + 1) * d]);
            }
        }
    }
    Samples { x, dw, rows: ensemble.valid_paths().collect() }
}

/// Scatters node-major blocks (`[node][path * w]`) into path-major storage.
fn path_major(blocks: &[Vec<f64>], np: usize, w: usize) -> Vec<f64> {
    let n = blocks.len();
    let mut out = vec![0.0; np * n * w];
    for (i, blk) in blocks.iter().enumerate() {
        for p in 0..np {
            out[(p * n + i) * w..(p * n + i + 1) * w].copy_from_slice(&blk[p * w..(p + 1) * w]);
        }
    }
    out
}

fn first_regression(
    spec: &ProblemSpec,
    ensemble: &PathEnsemble,
    grid: AdjointGrid,
    kind: AdjointKind,
    degree: u8,
) -> Result<AdjointSolution> {
    let (m, d) = (spec.state_dim, spec.noise_dim);
    let np = ensemble.n_paths();
    let n = grid.nodes();
    let s = samples(ensemble, &grid);
    let mut p_blocks = vec![Vec::new(); n];
    let mut k_blocks = vec![Vec::new(); n];
    p_blocks[n - 1] = (0..np).flat_map(|r| terminal_first(spec, kind, &s.x[n - 1][r * m..(r + 1) * m])).collect();

    for i in (0..n - 1).rev() {
        let h = grid.h(i);
        let x = &s.x[i];
        let next = &p_blocks[i + 1];
        let basis = PolynomialBasis::fit(x, m, &s.rows, degree);
        let mut target_k = vec![0.0; np * m * d];
        for r in 0..np {
            for a in 0..m {
                for j in 0..d {
                    target_k[(r * m + a) * d + j] = next[r * m + a] * s.dw[i][r * d + j] / h;
                }
            }
        }
        let k_fit = project(&basis, x, m, &s.rows, &target_k, m * d)?;
        let u = ensemble.control().at_step(grid.steps[i]);
        let target_p: Vec<f64> = (0..np)
            .into_par_iter()
            .flat_map_iter(|r| {
                let mut ws = Workspace::new(spec);
                ws.set(&x[r * m..(r + 1) * m], u);
                let loc = Local::new(spec, kind, &ws);
                let mut drive = vec![0.0; m];
                first_driver(&loc, &next[r * m..(r + 1) * m], &k_fit[r * m * d..(r + 1) * m * d], m, d, &mut drive);
                (0..m).map(move |a| next[r * m + a] + h * drive[a]).collect::<Vec<_>>()
            })
            .collect();
        p_blocks[i] = project(&basis, x, m, &s.rows, &target_p, m)?;
        k_blocks[i] = k_fit;
    }
    k_blocks[n - 1] = k_blocks[n - 2].clone();
    Ok(AdjointSolution {
        grid,
        kind,
        backend: Backend::Regression,
        state_dim: m,
        noise_dim: d,
        n_paths: np,
        p: path_major(&p_blocks, np, m),
        k: path_major(&k_blocks, np, m * d),
    })
}

fn second_regression(spec: &ProblemSpec, ensemble: &PathEnsemble, first: &AdjointSolution, degree: u8) -> Result<SecondOrderAdjoint> {
    let (m, d) = (spec.state_dim, spec.noise_dim);
    let mm = m * m;
    let np = ensemble.n_paths();
    let grid = first.grid.clone();
    let kind = first.kind;
    let n = grid.nodes();
    let s = samples(ensemble, &grid);
    // Upper triangle only; the lower one is mirrored so P stays symmetric.
    let upper: Vec<(usize, usize)> = (0..m).flat_map(|a| (a..m).map(move |c| (a, c))).collect();
    let nu = upper.len();
    let mut p_blocks = vec![Vec::new(); n];
    let mut q_blocks = vec![Vec::new(); n];
    p_blocks[n - 1] = (0..np).flat_map(|r| terminal_second(spec, kind, &s.x[n - 1][r * m..(r + 1) * m])).collect();

    let full = |packed: &[f64], np: usize| -> Vec<f64> {
        let mut out = vec![0.0; np * mm];
        for r in 0..np {
            for (t, &(a, c)) in upper.iter().enumerate() {
                let v = packed[r * nu + t];
                out[r * mm + a * m + c] = v;
                out[r * mm + c * m + a] = v;
            }
        }
        out
    };

    for i in (0..n - 1).rev() {
        let h = grid.h(i);
        let x = &s.x[i];
        let next = &p_blocks[i + 1];
        let basis = PolynomialBasis::fit(x, m, &s.rows, degree);
        let mut target_q = vec![0.0; np * d * nu];
        for r in 0..np {
            for j in 0..d {
                let w = s.dw[i][r * d + j] / h;
                for (t, &(a, c)) in upper.iter().enumerate() {
                    target_q[(r * d + j) * nu + t] = next[r * mm + a * m + c] * w;
                }
            }
        }
        let q_packed = project(&basis, x, m, &s.rows, &target_q, d * nu)?;
        let q_full = full(&q_packed, np * d);
        let u = ensemble.control().at_step(grid.steps[i]);
        let target_p: Vec<f64> = (0..np)
            .into_par_iter()
            .flat_map_iter(|r| {
                let mut ws = Workspace::new(spec);
                ws.set(&x[r * m..(r + 1) * m], u);
                let loc = Local::new(spec, kind, &ws);
                let hxx = hessian_h(&loc, first.p(r, i), first.k(r, i), m, d);
                let pn = &next[r * mm..(r + 1) * mm];
                let drive = second_driver(&loc, pn, &q_full[r * d * mm..(r + 1) * d * mm], &hxx, m, d);
                upper
                    .iter()
                    .map(|&(a, c)| pn[a * m + c] + 0.5 * h * (drive[a * m + c] + drive[c * m + a]))
                    .collect::<Vec<_>>()
            })
            .collect();
        p_blocks[i] = full(&project(&basis, x, m, &s.rows, &target_p, nu)?, np);
        q_blocks[i] = q_full;
    }
    q_blocks[n - 1] = q_blocks[n - 2].clone();
    Ok(SecondOrderAdjoint {
        grid,
        kind,
        backend: Backend::Regression,
        state_dim: m,
        noise_dim: d,
        n_paths: np,
        big_p: path_major(&p_blocks, np, mm),
        big_q: path_major(&q_blocks, np, d * mm),
    })
}

/// Hamiltonian value with its three additive parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HamiltonianEval {
    pub value: f64,
    /// `f` or `l`.
    pub running: f64,
    /// `<p, b>`.
    pub drift: f64,
    /// `sum_j <K_j, sigma^j>`.
    pub diffusion: f64,
}

/// `H = f + <p,b> + sum_j <K_j, sigma^j>` for the cost kind, with `l` in
/// place of `f` for the constraint kind.
pub fn hamiltonian(spec: &ProblemSpec, x: &[f64], u: &[f64], p: &[f64], k: &[f64], kind: AdjointKind) -> Result<HamiltonianEval> {
    let (m, d) = (spec.state_dim, spec.noise_dim);
    if x.len() != m || u.len() != spec.control_dim() || p.len() != m || k.len() != m * d {
        return Err(Error::Dimension(format!(
            "hamiltonian expects x, p of length {m}, u of length {}, K of length {}",
            spec.control_dim(),
            m * d
        )));
    }
    let pt = spec.point(x, u);
    let running = match kind {
        AdjointKind::Cost => spec.f.value.eval_scalar(&pt),
        AdjointKind::Constraint => spec.l.value.eval_scalar(&pt),
    };
    let b = spec.b.value.eval(&pt);
    let drift: f64 = p.iter().zip(&b).map(|(a, c)| a * c).sum();
    let diffusion = if k.iter().all(|v| *v == 0.0) {
        0.0
    } else {
        let s = spec.sigma.value.eval(&pt);
        k.iter().zip(&s).map(|(a, c)| a * c).sum()
    };
    Ok(HamiltonianEval { value: running + drift + diffusion, running, drift, diffusion })
}

/// `1/2 sum_j (sigma^j(u) - sigma^j(v))' P (sigma^j(u) - sigma^j(v))`.
pub fn trace_term(spec: &ProblemSpec, x: &[f64], u: &[f64], v: &[f64], big_p: &[f64]) -> f64 {
    if spec.is_deterministic() || big_p.iter().all(|c| *c == 0.0) {
        return 0.0;
    }
    let (m, d) = (spec.state_dim, spec.noise_dim);
    let su = spec.sigma.value.eval(&spec.point(x, u));
    let sv = spec.sigma.value.eval(&spec.point(x, v));
    let mut acc = 0.0;
    for j in 0..d {
        for a in 0..m {
            for c in 0..m {
                acc += (su[a * d + j] - sv[a * d + j]) * big_p[a * m + c] * (su[c * d + j] - sv[c * d + j]);
            }
        }
    }
    0.5 * acc
}

/// Pathwise sensitivity kernel at time `tau` for the spike value `u`,
/// for every valid path in order.
pub fn kernel_paths(
    spec: &ProblemSpec,
    ensemble: &PathEnsemble,
    tau: f64,
    u: &[f64],
    first: &AdjointSolution,
    second: &SecondOrderAdjoint,
) -> Result<Vec<f64>> {
    let ubar = ensemble.control().at_time(tau).to_vec();
    let paths: Vec<usize> = ensemble.valid_paths().collect();
    paths
        .par_iter()
        .map(|&path| {
            let x = ensemble.state_at(path, tau);
            let (p, k) = first.at(path, tau);
            let hu = hamiltonian(spec, &x, u, &p, &k, AdjointKind::Constraint)?;
            let hb = hamiltonian(spec, &x, &ubar, &p, &k, AdjointKind::Constraint)?;
            Ok(hu.value - hb.value + trace_term(spec, &x, u, &ubar, &second.p_at(path, tau)))
        })
        .collect()
}

/// `E[k(tau)]` for the spike value `u`; exactly zero when `u` is the
/// candidate control at `tau`.
pub fn k_tau(
    spec: &ProblemSpec,
    ensemble: &PathEnsemble,
    tau: f64,
    u: &[f64],
    first: &AdjointSolution,
    second: &SecondOrderAdjoint,
) -> Result<MeanSe> {
    Ok(MeanSe::of(&kernel_paths(spec, ensemble, tau, u, first, second)?))
}

/// Pathwise `f + g_x' b + 1/2 sum_j sigma^j' g_xx sigma^j` at `(x, u)`.
pub fn r_integrand(spec: &ProblemSpec, x: &[f64], u: &[f64]) -> f64 {
    let zero = vec![0.0; x.len()];
    r_integrand_perturbed(spec, x, &zero, &zero, u)
}

/// The correction integrand with the variational displacements kept:
/// `f(x + y) + g_x(x + y)' B + 1/2 tr(g_xx(x + y) A)` with `y = y1 + y2`,
/// `B = b + b_x y + 1/2 b_xx y1 y1` and
/// `A = sum_j sigma^j sigma^j' + (sigma_x^j y1)(sigma_x^j y1)'`.
pub fn r_integrand_perturbed(spec: &ProblemSpec, x: &[f64], y1: &[f64], y2: &[f64], u: &[f64]) -> f64 {
    let (m, d) = (spec.state_dim, spec.noise_dim);
    let base = spec.point(x, u);
    let shifted: Vec<f64> = (0..m).map(|i| x[i] + y1[i] + y2[i]).collect();
    let moved = spec.point(&shifted, u);
    let f = spec.f.value.eval_scalar(&moved);
    let gx = spec.g.dx.eval(&moved);
    let gxx = spec.g.dxx.eval(&moved);
    let b = spec.b.value.eval(&base);
    let bx = spec.b.dx.eval(&base);
    let bxx = spec.b.dxx.eval(&base);
    let mut drift = 0.0;
    for i in 0..m {
        let mut bi = b[i];
        for a in 0..m {
            bi += bx[i * m + a] * (y1[a] + y2[a]);
            for c in 0..m {
                bi += 0.5 * bxx[(i * m + a) * m + c] * y1[a] * y1[c];
            }
        }
        drift += gx[i] * bi;
    }
    let mut quad = 0.0;
    if !spec.is_deterministic() {
        let s = spec.sigma.value.eval(&base);
        let sx = spec.sigma.dx.eval(&base);
        for j in 0..d {
            let col: Vec<f64> = (0..m).map(|i| s[i * d + j]).collect();
            let dir: Vec<f64> = (0..m).map(|i| (0..m).map(|a| sx[(i * d + j) * m + a] * y1[a]).sum()).collect();
            for a in 0..m {
                for c in 0..m {
                    quad += gxx[a * m + c] * (col[a] * col[c] + dir[a] * dir[c]);
                }
            }
        }
    }
    f + drift + 0.5 * quad
}

/// `R` at the candidate's terminal time, in the limit of a vanishing spike.
pub fn r_tau(spec: &ProblemSpec, ensemble: &PathEnsemble, tau: f64) -> MeanSe {
    let u = ensemble.control().at_time(tau).to_vec();
    ensemble.mean_over_paths(|p| r_integrand(spec, &ensemble.state_at(p, tau), &u))
}

/// CSV `t, p_1..p_m, K_11..K_md` with path-averaged values.
pub fn write_first_csv(path: &Path, sol: &AdjointSolution, ensemble: &PathEnsemble) -> Result<()> {
    let (m, d) = (sol.state_dim, sol.noise_dim);
    let mut header = vec!["t".to_string()];
    header.extend((1..=m).map(|i| format!("p_{i}")));
    header.extend((1..=m).flat_map(|i| (1..=d).map(move |j| format!("K_{i}{j}"))));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let paths: Vec<usize> = ensemble.valid_paths().collect();
    let rows = (0..sol.grid.nodes()).map(|i| {
        let (p, k) = sol.mean(i, &paths);
        let mut row = vec![fmt_f64(sol.grid.times[i])];
        row.extend(p.iter().chain(&k).map(|v| fmt_f64(*v)));
        row
    });
    write_csv(path, &header, rows)
}

/// CSV `t, P_11..P_mm` with path-averaged values.
pub fn write_second_csv(path: &Path, sol: &SecondOrderAdjoint, ensemble: &PathEnsemble) -> Result<()> {
    let m = sol.state_dim;
    let mut header = vec!["t".to_string()];
    header.extend((1..=m).flat_map(|i| (1..=m).map(move |j| format!("P_{i}{j}"))));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let paths: Vec<usize> = ensemble.valid_paths().collect();
    let rows = (0..sol.grid.nodes()).map(|i| {
        let mut row = vec![fmt_f64(sol.grid.times[i])];
        row.extend(sol.mean(i, &paths).iter().map(|v| fmt_f64(*v)));
        row
    });
    write_csv(path, &header, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{load_problem, lq};
    use crate::simulate::{simulate_ensemble, ControlProcess, TimeGrid};
    use std::f64::consts::LN_2;

    fn ensemble(spec: &ProblemSpec, steps: usize, paths: usize) -> PathEnsemble {
        let grid = TimeGrid::new(spec.horizon, steps).unwrap();
        simulate_ensemble(spec, &ControlProcess::constant(grid, &[1.0]), paths, 7).unwrap()
    }

    fn solve(spec: &ProblemSpec, ens: &PathEnsemble, tau: f64, kind: AdjointKind, backend: Backend) -> (AdjointSolution, SecondOrderAdjoint) {
        let opts = AdjointOptions { backend, degree: 3 };
        let first = solve_first_adjoint(spec, ens, tau, kind, opts).unwrap();
        let second = solve_second_adjoint(spec, ens, &first, opts).unwrap();
        (first, second)
    }

    #[test]
    fn grid_ends_exactly_at_tau() {
        let spec = load_problem("example1").unwrap();
        let ens = ensemble(&spec, 1000, 1);
        let g = AdjointGrid::new(&ens, LN_2).unwrap();
        assert_eq!(*g.times.last().unwrap(), LN_2);
        assert_eq!(g.nodes(), 695);
        let g = AdjointGrid::new(&ens, 0.5).unwrap();
        assert_eq!(g.nodes(), 501);
        assert_eq!(*g.times.last().unwrap(), 0.5);
        assert!(AdjointGrid::new(&ens, 1.5).is_err());
    }

    #[test]
    fn example1_constraint_adjoint() {
        let spec = load_problem("example1").unwrap();
        let ens = ensemble(&spec, 10_000, 1);
        let (p0, big_p0) = solve(&spec, &ens, LN_2, AdjointKind::Constraint, Backend::Ode);
        assert_eq!(p0.p(0, p0.grid.nodes() - 1), &[0.0]);
        assert!((p0.p(0, 0)[0] - 1.0).abs() < 1e-8);
        let (p, _) = p0.at(0, 0.3);
        assert!((p[0] - ((LN_2 - 0.3).exp() - 1.0)).abs() < 1e-8);
        assert!(p0.k.iter().all(|v| *v == 0.0));
        assert!(big_p0.big_p.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn example1_cost_adjoint_vanishes() {
        let spec = load_problem("example1").unwrap();
        let ens = ensemble(&spec, 1000, 1);
        let (p, big_p) = solve(&spec, &ens, LN_2, AdjointKind::Cost, Backend::Ode);
        assert!(p.p.iter().chain(&p.k).all(|v| *v == 0.0));
        assert!(big_p.big_p.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn example2_adjoints_vanish_on_both_backends() {
        let spec = load_problem("example2").unwrap();
        let ens = ensemble(&spec, 50, 500);
        for backend in [Backend::Ode, Backend::Regression] {
            for kind in [AdjointKind::Cost, AdjointKind::Constraint] {
                let (p, big_p) = solve(&spec, &ens, 0.5, kind, backend);
                assert!(p.p.iter().chain(&p.k).all(|v| v.abs() < 1e-12));
                assert!(big_p.big_p.iter().chain(&big_p.big_q).all(|v| v.abs() < 1e-12));
            }
        }
    }

    #[test]
    fn ode_backend_rejects_multiplicative_noise() {
        let spec = ProblemSpec::build(crate::model::ProblemSource {
            name: "gbm",
            state_dim: 1,
            noise_dim: 1,
            x0: vec![1.0],
            horizon: 1.0,
            alpha: 2.0,
            domain: crate::model::ControlDomain::finite(vec![vec![1.0]]).unwrap(),
            seed: None,
            b: "u*x",
            sigma: "0.2*x",
            f: "u",
            g: "0",
            phi: "x",
        })
        .unwrap();
        let ens = ensemble(&spec, 20, 10);
        let opts = AdjointOptions { backend: Backend::Ode, degree: 3 };
        assert!(matches!(
            solve_first_adjoint(&spec, &ens, 0.5, AdjointKind::Cost, opts),
            Err(Error::Backend(_))
        ));
        assert_eq!(Backend::auto(&spec), Backend::Regression);
    }

    #[test]
    fn lq_second_order_closed_form() {
        let spec = load_problem("lq-linear").unwrap();
        let ens = ensemble(&spec, 2000, 200);
        let tau = 0.8;
        let (_, big_p) = solve(&spec, &ens, tau, AdjointKind::Cost, Backend::Ode);
        let two_a = 2.0 * lq::A;
        let exact = |t: f64| (two_a * (tau - t)).exp() * (1.0 + 1.0 / two_a) - 1.0 / two_a;
        let t = tau - 0.2;
        assert!((big_p.p_at(0, t)[0] - exact(t)).abs() < 1e-6);
        assert_eq!(big_p.p(0, big_p.grid.nodes() - 1), &[1.0]);
        assert_eq!(big_p.asymmetry(), 0.0);
    }

    #[test]
    fn lq_regression_matches_ode() {
        let spec = load_problem("lq-linear").unwrap();
        let ens = ensemble(&spec, 100, 4000);
        let tau = 0.8;
        let (p_ode, big_ode) = solve(&spec, &ens, tau, AdjointKind::Cost, Backend::Ode);
        let (p_reg, big_reg) = solve(&spec, &ens, tau, AdjointKind::Cost, Backend::Regression);
        let paths: Vec<usize> = ens.valid_paths().collect();
        for i in 0..p_ode.grid.nodes() {
            assert!((p_ode.mean(i, &paths).0[0] - p_reg.mean(i, &paths).0[0]).abs() < 0.05);
            assert!((big_ode.mean(i, &paths)[0] - big_reg.mean(i, &paths)[0]).abs() < 0.1);
        }
        assert_eq!(p_reg.p(3, p_reg.grid.nodes() - 1)[0], ens.state_at(3, tau)[0]);
    }

    #[test]
    fn hamiltonian_examples() {
        let spec = load_problem("example1").unwrap();
        let h = hamiltonian(&spec, &[1.0], &[2.0], &[0.0], &[0.0], AdjointKind::Cost).unwrap();
        assert_eq!(h.value, 2.0);
        let h0 = hamiltonian(&spec, &[1.0], &[2.0], &[1.0], &[0.0], AdjointKind::Constraint).unwrap();
        assert_eq!(h0.value, 6.0);
        assert_eq!(h0.value - h0.running - h0.drift - h0.diffusion, 0.0);
        assert!(hamiltonian(&spec, &[1.0, 2.0], &[2.0], &[0.0], &[0.0], AdjointKind::Cost).is_err());
        let spec = load_problem("nonlinear").unwrap();
        let h = hamiltonian(&spec, &[0.7], &[2.0], &[0.3], &[0.2], AdjointKind::Cost).unwrap();
        assert_eq!(h.value, h.running + h.drift + h.diffusion);
        assert_eq!(h.diffusion, 0.2 * 0.6);
    }

    #[test]
    fn kernel_examples() {
        let spec = load_problem("example1").unwrap();
        let ens = ensemble(&spec, 10_000, 1);
        let (p0, big_p0) = solve(&spec, &ens, LN_2, AdjointKind::Constraint, Backend::Ode);
        let k = k_tau(&spec, &ens, 0.3, &[2.0], &p0, &big_p0).unwrap();
        assert!((k.mean - 2.0 * (-0.3f64).exp()).abs() < 1e-6, "{}", k.mean);
        let k = k_tau(&spec, &ens, LN_2, &[2.0], &p0, &big_p0).unwrap();
        assert!((k.mean - 1.0).abs() < 1e-9);
        for t in [0.0, 0.2, 0.5, LN_2] {
            assert_eq!(k_tau(&spec, &ens, t, &[1.0], &p0, &big_p0).unwrap().mean, 0.0);
        }
        let spec = load_problem("example2").unwrap();
        let ens = ensemble(&spec, 50, 300);
        let (p0, big_p0) = solve(&spec, &ens, 0.5, AdjointKind::Constraint, Backend::Regression);
        for t in [0.1, 0.25, 0.4] {
            let k = k_tau(&spec, &ens, t, &[2.0], &p0, &big_p0).unwrap();
            assert!(k.mean.abs() < 1e-12);
        }
    }

    #[test]
    fn correction_term() {
        let spec = load_problem("example1").unwrap();
        let ens = ensemble(&spec, 1000, 1);
        assert_eq!(r_tau(&spec, &ens, LN_2).mean, 1.0);
        let spec = load_problem("example2").unwrap();
        let ens = ensemble(&spec, 50, 100);
        assert_eq!(r_tau(&spec, &ens, 0.5).mean, 1.0);
        let spec = load_problem("lq-linear").unwrap();
        // f = g = x^2/2, b = a x + c u, sigma = s0.
        let x = 0.4;
        let expect = 0.5 * x * x + x * (lq::A * x + lq::C) + 0.5 * lq::S0 * lq::S0;
        assert!((r_integrand(&spec, &[x], &[1.0]) - expect).abs() < 1e-14);
        let y1 = 0.1;
        let y2 = 0.02;
        let z = x + y1 + y2;
        let expect = 0.5 * z * z + z * (lq::A * x + lq::C + lq::A * (y1 + y2)) + 0.5 * lq::S0 * lq::S0;
        assert!((r_integrand_perturbed(&spec, &[x], &[y1], &[y2], &[1.0]) - expect).abs() < 1e-14);
    }

    #[test]
    fn csv_dumps() {
        let spec = load_problem("example1").unwrap();
        let ens = ensemble(&spec, 100, 1);
        let (p, big_p) = solve(&spec, &ens, LN_2, AdjointKind::Constraint, Backend::Ode);
        let dir = tempfile::tempdir().unwrap();
        write_first_csv(&dir.path().join("p.csv"), &p, &ens).unwrap();
        write_second_csv(&dir.path().join("pp.csv"), &big_p, &ens).unwrap();
        let text = std::fs::read_to_string(dir.path().join("p.csv")).unwrap();
        assert!(text.starts_with("t,p_1,K_11\n"));
        assert_eq!(text.lines().count(), p.grid.nodes() + 1);
        let text = std::fs::read_to_string(dir.path().join("pp.csv")).unwrap();
        assert!(text.starts_with("t,P_11\n"));
    }
}
