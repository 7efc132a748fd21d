//! Python bindings: problems, terminal-time analysis, adjoints and the
//! maximum-principle checks. Reports come back as plain dicts built from the
//! same JSON the command-line tool writes.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use varterm::adjoint::{solve_first_adjoint, solve_second_adjoint, AdjointKind, AdjointOptions, Backend};
use varterm::error::Error;
use varterm::model::{ControlDomain, ProblemSpec, BOX_LATTICE_POINTS, REGISTRY};
use varterm::report::to_json_string;
use varterm::simulate::{simulate_ensemble, ControlProcess, TimeGrid};
use varterm::smp::{brute_force_json, brute_force_search, check_smp, cost_functional, smp_json, solve_adjoints};
use varterm::terminal::{analyze, terminal_json, TerminalAnalysis};
use varterm::variation::{rate_json, tau_rate_empirical, tau_rate_theoretical};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::DegenerateRate(_) | Error::InvalidPaths { .. } | Error::NonFiniteCurve(_) | Error::RankDeficient(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_dict<'py>(py: Python<'py>, value: &serde_json::Value) -> PyResult<Bound<'py, PyDict>> {
    let parsed = py.import("json")?.call_method1("loads", (to_json_string(value),))?;
    Ok(parsed.cast_into::<PyDict>()?)
}

/// A parsed control problem.
#[pyclass(frozen, name = "Problem", module = "varterm_py")]
struct PyProblem {
    spec: ProblemSpec,
}

#[pymethods]
impl PyProblem {
    /// Loads a registry problem by name or a TOML problem file by path.
    #[new]
    fn new(source: &str) -> PyResult<Self> {
        Ok(PyProblem { spec: varterm::load_problem(source).map_err(to_py)? })
    }

    #[getter]
    fn name(&self) -> &str {
        &self.spec.name
    }

    #[getter]
    fn state_dim(&self) -> usize {
        self.spec.state_dim
    }

    #[getter]
    fn noise_dim(&self) -> usize {
        self.spec.noise_dim
    }

    #[getter]
    fn x0(&self) -> Vec<f64> {
        self.spec.x0.clone()
    }

    #[getter]
    fn horizon(&self) -> f64 {
        self.spec.horizon
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.spec.alpha
    }

    #[getter]
    fn seed(&self) -> Option<u64> {
        self.spec.seed
    }

    #[getter]
    fn is_deterministic(&self) -> bool {
        self.spec.is_deterministic()
    }

    /// Points of U used by the checks; a lattice when U is a box.
    fn control_points(&self) -> Vec<Vec<f64>> {
        let per_axis = match self.spec.domain {
            ControlDomain::Finite { .. } => 1,
            ControlDomain::Box { .. } => BOX_LATTICE_POINTS,
        };
        self.spec.domain.evaluation_points(per_axis)
    }

    fn __repr__(&self) -> String {
        format!("Problem({:?}, m={}, d={})", self.spec.name, self.spec.state_dim, self.spec.noise_dim)
    }
}

/// Run configuration with the command-line defaults filled in.
struct Setup<'a> {
    spec: &'a ProblemSpec,
    grid: TimeGrid,
    control: Vec<f64>,
    paths: usize,
    seed: u64,
}

impl<'a> Setup<'a> {
    fn new(
        problem: &'a PyProblem,
        control: Option<Vec<f64>>,
        grid_n: usize,
        paths: Option<usize>,
        seed: Option<u64>,
    ) -> PyResult<Self> {
        let spec = &problem.spec;
        let seed = seed.or(spec.seed).ok_or_else(|| PyValueError::new_err("no seed given and the problem has none"))?;
        let paths = paths.unwrap_or(if spec.is_deterministic() { 1 } else { 10_000 });
        let control = control.unwrap_or_else(|| spec.domain.evaluation_points(1).remove(0));
        if !spec.domain.contains(&control) {
            return Err(PyValueError::new_err(format!("control {control:?} is not in the control domain")));
        }
        let grid = TimeGrid::new(spec.horizon, grid_n).map_err(to_py)?;
        Ok(Setup { spec, grid, control, paths, seed })
    }

    fn candidate(&self) -> PyResult<TerminalAnalysis> {
        let process = ControlProcess::constant(self.grid, &self.control);
        analyze(self.spec, &process, self.paths, self.seed).map_err(to_py)
    }
}

fn backend_of(spec: &ProblemSpec, name: Option<&str>) -> PyResult<Backend> {
    match name {
        None => Ok(Backend::auto(spec)),
        Some("ode") => Ok(Backend::Ode),
        Some("regression") => Ok(Backend::Regression),
        Some(other) => Err(PyValueError::new_err(format!("unknown backend `{other}`; use ode or regression"))),
    }
}

/// Names of the built-in problems.
#[pyfunction]
fn registry() -> Vec<&'static str> {
    REGISTRY.to_vec()
}

/// Simulates the state under a constant control; one flat row per path,
/// node-major with `state_dim` entries per node.
#[pyfunction]
#[pyo3(signature = (problem, control=None, grid_n=1000, paths=None, seed=None))]
fn simulate(
    py: Python<'_>,
    problem: &PyProblem,
    control: Option<Vec<f64>>,
    grid_n: usize,
    paths: Option<usize>,
    seed: Option<u64>,
) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let s = Setup::new(problem, control, grid_n, paths, seed)?;
    py.detach(|| {
        let process = ControlProcess::constant(s.grid, &s.control);
        let ens = simulate_ensemble(s.spec, &process, s.paths, s.seed).map_err(to_py)?;
        let times = (0..s.grid.nodes()).map(|i| s.grid.time(i)).collect();
        let rows = (0..ens.n_paths()).map(|p| ens.path(p).to_vec()).collect();
        Ok((times, rows))
    })
}

/// Terminal time of a constant control.
#[pyfunction]
#[pyo3(signature = (problem, control=None, grid_n=1000, paths=None, seed=None))]
fn terminal_time<'py>(
    py: Python<'py>,
    problem: &PyProblem,
    control: Option<Vec<f64>>,
    grid_n: usize,
    paths: Option<usize>,
    seed: Option<u64>,
) -> PyResult<Bound<'py, PyDict>> {
    let s = Setup::new(problem, control, grid_n, paths, seed)?;
    let body = py.detach(|| s.candidate().map(|c| terminal_json(&c.estimate, c.h_at_tau())))?;
    to_dict(py, &body)
}

/// Cost of a constant control as `(mean, standard error)`.
#[pyfunction]
#[pyo3(signature = (problem, control=None, grid_n=1000, paths=None, seed=None))]
fn cost(
    py: Python<'_>,
    problem: &PyProblem,
    control: Option<Vec<f64>>,
    grid_n: usize,
    paths: Option<usize>,
    seed: Option<u64>,
) -> PyResult<(f64, f64)> {
    let s = Setup::new(problem, control, grid_n, paths, seed)?;
    py.detach(|| {
        let cand = s.candidate()?;
        let j = cost_functional(s.spec, &cand.ensemble, cand.tau());
        Ok((j.mean, j.se_or_zero()))
    })
}

/// Path-mean first and second order adjoints on the adjoint grid:
/// `(times, p, P)` with `p[node]` of length `state_dim` and `P[node]`
/// row-major `state_dim x state_dim`.
#[pyfunction]
#[pyo3(signature = (problem, kind="cost", backend=None, control=None, grid_n=1000, paths=None, seed=None))]
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
fn adjoint(
    py: Python<'_>,
    problem: &PyProblem,
    kind: &str,
    backend: Option<&str>,
    control: Option<Vec<f64>>,
    grid_n: usize,
    paths: Option<usize>,
    seed: Option<u64>,
) -> PyResult<(Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let kind = match kind {
        "cost" => AdjointKind::Cost,
        "constraint" => AdjointKind::Constraint,
        other => return Err(PyValueError::new_err(format!("unknown adjoint kind `{other}`; use cost or constraint"))),
    };
    let options = AdjointOptions { backend: backend_of(&problem.spec, backend)?, degree: 3 };
    let s = Setup::new(problem, control, grid_n, paths, seed)?;
    py.detach(|| {
        let cand = s.candidate()?;
        let ens = &cand.ensemble;
        let first = solve_first_adjoint(s.spec, ens, cand.tau(), kind, options).map_err(to_py)?;
        let second = solve_second_adjoint(s.spec, ens, &first, options).map_err(to_py)?;
        let valid: Vec<usize> = ens.valid_paths().collect();
        let nodes = first.grid.nodes();
        let times = first.grid.times.clone();
        let p = (0..nodes).map(|i| first.mean(i, &valid).0).collect();
        let big_p = (0..nodes).map(|i| second.mean(i, &valid)).collect();
        Ok((times, p, big_p))
    })
}

/// Scans the maximum-principle inequality over a tau grid and the points of U.
#[pyfunction]
#[pyo3(signature = (problem, control=None, grid_n=1000, paths=None, seed=None, tau_grid=64, backend=None))]
#[allow(clippy::too_many_arguments)]
fn check_smp_report<'py>(
    py: Python<'py>,
    problem: &PyProblem,
    control: Option<Vec<f64>>,
    grid_n: usize,
    paths: Option<usize>,
    seed: Option<u64>,
    tau_grid: usize,
    backend: Option<&str>,
) -> PyResult<Bound<'py, PyDict>> {
    let options = AdjointOptions { backend: backend_of(&problem.spec, backend)?, degree: 3 };
    let s = Setup::new(problem, control, grid_n, paths, seed)?;
    let body = py.detach(|| -> PyResult<_> {
        let cand = s.candidate()?;
        let adj = solve_adjoints(s.spec, &cand, options).map_err(to_py)?;
        let report = check_smp(s.spec, &cand, &adj, tau_grid).map_err(to_py)?;
        Ok(smp_json(&report))
    })?;
    to_dict(py, &body)
}

/// Empirical and adjoint-based terminal-time rate under a spike of value
/// `spike_u` at `spike_tau`.
#[pyfunction]
#[pyo3(signature = (problem, spike_u, spike_tau, eps_ladder=vec![0.02, 0.01, 0.005], control=None, grid_n=1000, paths=None, seed=None, backend=None))]
#[allow(clippy::too_many_arguments)]
fn tau_rate<'py>(
    py: Python<'py>,
    problem: &PyProblem,
    spike_u: Vec<f64>,
    spike_tau: f64,
    eps_ladder: Vec<f64>,
    control: Option<Vec<f64>>,
    grid_n: usize,
    paths: Option<usize>,
    seed: Option<u64>,
    backend: Option<&str>,
) -> PyResult<Bound<'py, PyDict>> {
    let options = AdjointOptions { backend: backend_of(&problem.spec, backend)?, degree: 3 };
    let s = Setup::new(problem, control, grid_n, paths, seed)?;
    let body = py.detach(|| -> PyResult<_> {
        let cand = s.candidate()?;
        let rate = tau_rate_empirical(s.spec, &cand, &spike_u, spike_tau, &eps_ladder).map_err(to_py)?;
        let adj = solve_adjoints(s.spec, &cand, options).map_err(to_py)?;
        let theory =
            tau_rate_theoretical(s.spec, &cand, &adj.constraint, &adj.constraint_second, spike_tau, &spike_u)
                .map_err(to_py)?;
        Ok(rate_json(&rate, Some(&theory), None))
    })?;
    to_dict(py, &body)
}

/// Exhaustive search over controls constant on `intervals` equal pieces.
#[pyfunction]
#[pyo3(signature = (problem, intervals, control=None, grid_n=1000, paths=None, seed=None))]
fn brute_force<'py>(
    py: Python<'py>,
    problem: &PyProblem,
    intervals: usize,
    control: Option<Vec<f64>>,
    grid_n: usize,
    paths: Option<usize>,
    seed: Option<u64>,
) -> PyResult<Bound<'py, PyDict>> {
    let s = Setup::new(problem, control, grid_n, paths, seed)?;
    let body = py.detach(|| -> PyResult<_> {
        let report =
            brute_force_search(s.spec, intervals, s.grid.steps(), s.paths, s.seed, &s.control).map_err(to_py)?;
        Ok(brute_force_json(&report))
    })?;
    to_dict(py, &body)
}

#[pymodule]
fn varterm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyProblem>()?;
    m.add_function(wrap_pyfunction!(registry, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(terminal_time, m)?)?;
    m.add_function(wrap_pyfunction!(cost, m)?)?;
    m.add_function(wrap_pyfunction!(adjoint, m)?)?;
    m.add_function(wrap_pyfunction!(check_smp_report, m)?)?;
    m.add_function(wrap_pyfunction!(tau_rate, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force, m)?)?;
    Ok(())
}
