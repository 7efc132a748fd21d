//! Command-line driver: problem ingestion, pipeline runs and report files.
//!
//! Exit status: 0 when the run's verdicts pass, 1 when a verdict fails or a
//! numerical hypothesis breaks, 2 on usage and configuration errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use varterm::adjoint::{
    write_first_csv, write_second_csv, AdjointKind, AdjointOptions, AdjointSolution, Backend, SecondOrderAdjoint,
};
use varterm::error::Error;
use varterm::model::{load_problem, ProblemSpec};
use varterm::report::{num, nums, to_json_string, write_csv, fmt_f64, write_json};
use varterm::simulate::{simulate_ensemble, write_ensemble_csv, ControlProcess, TimeGrid};
use varterm::smp::{
    brute_force_json, brute_force_search, check_smp, cost_functional, smp_json, solve_adjoints, write_brute_force_csv,
    write_smp_csv,
};
use varterm::terminal::{analyze, classify_case, terminal_json, write_curve_csv, TerminalAnalysis};
use varterm::variation::{
    moment_check, moments_json, rate_json, tau_rate_empirical, tau_rate_theoretical, write_rate_csv, MOMENT_NAMES,
};

mod reproduce;

#[derive(Debug, Parser)]
#[command(name = "varterm", version, about = "Maximum-principle verification for control problems with a mean-constrained terminal time")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the state under a constant control and dump the paths.
    Simulate(RunArgs),
    /// Locate the terminal time of a constant control.
    Tau(RunArgs),
    /// Estimate the cost of a constant control.
    Cost(RunArgs),
    /// Solve the cost and constraint adjoint equations.
    Adjoint(RunArgs),
    /// Moment ladder of the variational expansion under a spike.
    Variation(RunArgs),
    /// Empirical and adjoint-based terminal-time rate under a spike.
    Rate(RunArgs),
    /// Scan the maximum-principle inequality over (tau, u).
    CheckSmp(RunArgs),
    /// Exhaustive search over piecewise-constant controls.
    BruteForce(RunArgs),
    /// Run the full verification of a built-in example.
    Reproduce(ReproduceArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Ode,
    Regression,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Seed for all randomness; defaults to the problem's own seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for reports.
    #[arg(long, default_value = "varterm-out")]
    pub out: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Registry name or path to a TOML problem file.
    #[arg(long)]
    pub problem: String,
    /// Number of time steps on [0, T].
    #[arg(long, default_value_t = 1000)]
    pub grid_n: usize,
    /// Monte Carlo paths (defaults to 1 for deterministic problems, 10000 otherwise).
    #[arg(long)]
    pub paths: Option<usize>,
    /// Decreasing spike widths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0.02,0.01,0.005")]
    pub eps_ladder: Vec<f64>,
    /// Points of the tau grid for the inequality scan.
    #[arg(long, default_value_t = 64)]
    pub tau_grid: usize,
    /// Adjoint backend (default: ode when admissible, else regression).
    #[arg(long, value_enum)]
    pub backend: Option<BackendArg>,
    /// Candidate constant control, comma separated (default: first point of U).
    #[arg(long, value_delimiter = ',')]
    pub control: Option<Vec<f64>>,
    /// Spike value, comma separated (default: first point of U other than the control).
    #[arg(long, value_delimiter = ',')]
    pub spike_u: Option<Vec<f64>>,
    /// Spike location.
    #[arg(long, default_value_t = 0.3)]
    pub spike_tau: f64,
    /// Intervals of the brute-force controls.
    #[arg(long, default_value_t = 10)]
    pub intervals: usize,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ReproduceArgs {
    /// `example1` or `example2`.
    pub example: String,
    #[command(flatten)]
    pub common: CommonArgs,
}

/// Failure of a run, carrying its exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::DegenerateRate(_)
            | Error::InvalidPaths { .. }
            | Error::NonFiniteCurve(_)
            | Error::RankDeficient(_) => Failure::Numerical(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

pub type Outcome = Result<bool, Failure>;

/// Parses `args` (program name first), runs the command and returns the
/// exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let workers = match &cli.command {
        Command::Reproduce(a) => a.common.workers,
        Command::Simulate(a)
        | Command::Tau(a)
        | Command::Cost(a)
        | Command::Adjoint(a)
        | Command::Variation(a)
        | Command::Rate(a)
        | Command::CheckSmp(a)
        | Command::BruteForce(a) => a.common.workers,
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    match workers {
        Some(0) => {
            eprintln!("error: --workers must be positive");
            return 2;
        }
        Some(n) => builder = builder.num_threads(n),
        None => {}
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    match pool.install(|| dispatch(&cli.command)) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(Failure::Numerical(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

fn dispatch(command: &Command) -> Outcome {
    match command {
        Command::Simulate(a) => cmd_simulate(&Context::new(a)?),
        Command::Tau(a) => cmd_tau(&Context::new(a)?),
        Command::Cost(a) => cmd_cost(&Context::new(a)?),
        Command::Adjoint(a) => cmd_adjoint(&Context::new(a)?),
        Command::Variation(a) => cmd_variation(&Context::new(a)?),
        Command::Rate(a) => cmd_rate(&Context::new(a)?),
        Command::CheckSmp(a) => cmd_check_smp(&Context::new(a)?),
        Command::BruteForce(a) => cmd_brute_force(&Context::new(a)?),
        Command::Reproduce(a) => reproduce::run(a),
    }
}

/// Validated configuration of a single-problem run.
pub struct Context {
    pub spec: ProblemSpec,
    pub args: RunArgs,
    pub seed: u64,
    pub paths: usize,
    pub control: Vec<f64>,
    pub options: AdjointOptions,
}

impl Context {
    fn new(args: &RunArgs) -> Result<Self, Failure> {
        let spec = load_problem(&args.problem)?;
        let seed = resolve_seed(args.common.seed, &spec)?;
        let paths = args.paths.unwrap_or(if spec.is_deterministic() { 1 } else { 10_000 });
        if paths == 0 || args.grid_n < 2 || args.tau_grid < 2 || args.intervals == 0 {
            return Err(Failure::Usage("--paths, --intervals must be positive; --grid-n, --tau-grid at least 2".into()));
        }
        let control = match &args.control {
            Some(u) => u.clone(),
            None => spec.domain.evaluation_points(1).remove(0),
        };
        if !spec.domain.contains(&control) {
            return Err(Failure::Usage(format!("control {control:?} is not in the control domain")));
        }
        let backend = match args.backend {
            Some(BackendArg::Ode) => Backend::Ode,
            Some(BackendArg::Regression) => Backend::Regression,
            None => Backend::auto(&spec),
        };
        Ok(Context { spec, args: args.clone(), seed, paths, control, options: AdjointOptions { backend, degree: 3 } })
    }

    fn out(&self) -> Result<&Path, Failure> {
        prepare_out(&self.args.common.out)
    }

    fn grid(&self) -> Result<TimeGrid, Failure> {
        Ok(TimeGrid::new(self.spec.horizon, self.args.grid_n)?)
    }

    fn candidate(&self) -> Result<TerminalAnalysis, Failure> {
        let process = ControlProcess::constant(self.grid()?, &self.control);
        Ok(analyze(&self.spec, &process, self.paths, self.seed)?)
    }

    fn spike_u(&self) -> Result<Vec<f64>, Failure> {
        if let Some(u) = &self.args.spike_u {
            return Ok(u.clone());
        }
        self.spec
            .domain
            .evaluation_points(varterm::model::BOX_LATTICE_POINTS)
            .into_iter()
            .find(|u| *u != self.control)
            .ok_or_else(|| Failure::Usage("the control domain has a single point; no spike value available".into()))
    }

    fn header(&self) -> Value {
        json!({
            "problem": self.spec.name,
            "grid_n": self.args.grid_n,
            "paths": self.paths,
            "seed": self.seed,
            "control": nums(&self.control),
        })
    }
}

pub(crate) fn resolve_seed(seed: Option<u64>, spec: &ProblemSpec) -> Result<u64, Failure> {
    seed.or(spec.seed)
        .ok_or_else(|| Failure::Usage("no seed: pass --seed or set `seed` in the problem file".into()))
}

pub(crate) fn prepare_out(dir: &Path) -> Result<&Path, Failure> {
    fs::create_dir_all(dir)?;
    Ok(dir)
}

/// Writes `name` into the output directory and echoes it to stdout.
pub(crate) fn emit(dir: &Path, name: &str, mut body: Value, extra: Value) -> Result<(), Failure> {
    if let (Value::Object(b), Value::Object(e)) = (&mut body, extra) {
        for (k, v) in e {
            b.insert(k, v);
        }
    }
    write_json(&dir.join(name), &body)?;
    print!("{}", to_json_string(&body));
    Ok(())
}

fn cmd_simulate(ctx: &Context) -> Outcome {
    let out = ctx.out()?;
    let process = ControlProcess::constant(ctx.grid()?, &ctx.control);
    let ens = simulate_ensemble(&ctx.spec, &process, ctx.paths, ctx.seed)?;
    let file = fs::File::create(out.join("ensemble.csv"))?;
    write_ensemble_csv(&ens, std::io::BufWriter::new(file))?;
    let last = ens.grid().steps();
    let finals: Vec<f64> = (0..ctx.spec.state_dim)
        .map(|i| ens.mean_over_paths(|p| ens.state(p, last)[i]).mean)
        .collect();
    let body = json!({
        "valid_paths": ens.n_valid(),
        "mean_final_state": nums(&finals),
        "horizon": num(ctx.spec.horizon),
    });
    emit(out, "simulate.json", ctx.header(), body)?;
    Ok(true)
}

fn cmd_tau(ctx: &Context) -> Outcome {
    let out = ctx.out()?;
    let cand = ctx.candidate()?;
    write_curve_csv(&out.join("curve.csv"), &cand.curve, &cand.rate)?;
    let diag = classify_case(&cand.estimate, &cand.rate);
    let mut body = terminal_json(&cand.estimate, cand.h_at_tau());
    let ok = diag.is_ok();
    if let Err(e) = diag {
        body["diagnostic"] = Value::String(e.to_string());
    }
    body["verdict"] = Value::String(if ok { "pass" } else { "fail" }.into());
    emit(out, "tau.json", ctx.header(), body)?;
    Ok(ok)
}

fn cmd_cost(ctx: &Context) -> Outcome {
    let out = ctx.out()?;
    let cand = ctx.candidate()?;
    let j = cost_functional(&ctx.spec, &cand.ensemble, cand.tau());
    let body = json!({
        "tau": num(cand.tau()),
        "case": cand.case().tag(),
        "cost": num(j.mean),
        "se": num(j.se_or_zero()),
    });
    emit(out, "cost.json", ctx.header(), body)?;
    Ok(true)
}

fn adjoint_summary(first: &AdjointSolution, second: &SecondOrderAdjoint, paths: &[usize]) -> Value {
    let (p, k) = first.mean(0, paths);
    json!({
        "p_at_0": nums(&p),
        "k_at_0": nums(&k),
        "big_p_at_0": nums(&second.mean(0, paths)),
        "asymmetry": num(second.asymmetry()),
        "nodes": first.grid.nodes(),
    })
}

fn cmd_adjoint(ctx: &Context) -> Outcome {
    let out = ctx.out()?;
    let cand = ctx.candidate()?;
    let adj = solve_adjoints(&ctx.spec, &cand, ctx.options)?;
    let ens = &cand.ensemble;
    write_first_csv(&out.join("adjoint_cost.csv"), &adj.cost, ens)?;
    write_second_csv(&out.join("adjoint_cost_second.csv"), &adj.cost_second, ens)?;
    write_first_csv(&out.join("adjoint_constraint.csv"), &adj.constraint, ens)?;
    write_second_csv(&out.join("adjoint_constraint_second.csv"), &adj.constraint_second, ens)?;
    let paths: Vec<usize> = ens.valid_paths().collect();
    let body = json!({
        "backend": backend_name(ctx.options.backend),
        "tau": num(cand.tau()),
        "case": cand.case().tag(),
        "correction": num(varterm::adjoint::r_tau(&ctx.spec, ens, cand.tau()).mean),
        "cost": adjoint_summary(&adj.cost, &adj.cost_second, &paths),
        "constraint": adjoint_summary(&adj.constraint, &adj.constraint_second, &paths),
    });
    emit(out, "adjoint.json", ctx.header(), body)?;
    Ok(true)
}

pub(crate) fn backend_name(b: Backend) -> &'static str {
    match b {
        Backend::Ode => "ode",
        Backend::Regression => "regression",
    }
}

fn cmd_variation(ctx: &Context) -> Outcome {
    let out = ctx.out()?;
    let process = ControlProcess::constant(ctx.grid()?, &ctx.control);
    let ens = simulate_ensemble(&ctx.spec, &process, ctx.paths, ctx.seed)?;
    let u = ctx.spike_u()?;
    let table = moment_check(&ctx.spec, &ens, &u, ctx.args.spike_tau, &ctx.args.eps_ladder)?;
    let mut header = vec!["epsilon"];
    header.extend(MOMENT_NAMES);
    write_csv(
        &out.join("moments.csv"),
        &header,
        table.rows.iter().map(|r| {
            let mut row = vec![fmt_f64(r.effective_epsilon)];
            row.extend(r.ratios().iter().map(|v| fmt_f64(*v)));
            row
        }),
    )?;
    let mut body = moments_json(&table);
    body["spike_u"] = nums(&u);
    body["spike_tau"] = num(ctx.args.spike_tau);
    body["verdict"] = Value::String(if table.bounded() { "pass" } else { "fail" }.into());
    emit(out, "variation.json", ctx.header(), body)?;
    Ok(table.bounded())
}

fn cmd_rate(ctx: &Context) -> Outcome {
    let out = ctx.out()?;
    let cand = ctx.candidate()?;
    let u = ctx.spike_u()?;
    let tau = ctx.args.spike_tau;
    let rate = tau_rate_empirical(&ctx.spec, &cand, &u, tau, &ctx.args.eps_ladder)?;
    let adj = solve_adjoints(&ctx.spec, &cand, ctx.options)?;
    let theory = tau_rate_theoretical(&ctx.spec, &cand, &adj.constraint, &adj.constraint_second, tau, &u)?;
    let zero = zero_rate(&ctx.spec, &cand, &adj.constraint, &adj.constraint_second, tau, &u)?;
    write_rate_csv(&out.join("rate.csv"), &rate)?;
    let tol = (3.0 * theory.se_or_zero()).max(2e-3);
    let pass = (theory.mean - rate.extrapolated).abs() <= tol;
    let mut body = rate_json(&rate, Some(&theory), Some(zero));
    body["spike_u"] = nums(&u);
    body["spike_tau"] = num(tau);
    body["backend"] = Value::String(backend_name(ctx.options.backend).into());
    body["tolerance"] = num(tol);
    body["verdict"] = Value::String(if pass { "pass" } else { "fail" }.into());
    emit(out, "rate.json", ctx.header(), body)?;
    Ok(pass)
}

/// Rate predicted with identically zero constraint adjoints.
pub(crate) fn zero_rate(
    spec: &ProblemSpec,
    cand: &TerminalAnalysis,
    first: &AdjointSolution,
    second: &SecondOrderAdjoint,
    tau: f64,
    u: &[f64],
) -> Result<f64, Failure> {
    let (m, d) = (spec.state_dim, spec.noise_dim);
    let zp = AdjointSolution::zero(first.grid.clone(), AdjointKind::Constraint, m, d);
    let zq = SecondOrderAdjoint::zero(second.grid.clone(), AdjointKind::Constraint, m, d);
    Ok(tau_rate_theoretical(spec, cand, &zp, &zq, tau, u)?.mean)
}

fn cmd_check_smp(ctx: &Context) -> Outcome {
    let out = ctx.out()?;
    let cand = ctx.candidate()?;
    let adj = solve_adjoints(&ctx.spec, &cand, ctx.options)?;
    let report = check_smp(&ctx.spec, &cand, &adj, ctx.args.tau_grid)?;
    write_smp_csv(&out.join("smp.csv"), &report)?;
    let mut body = smp_json(&report);
    body["backend"] = Value::String(backend_name(ctx.options.backend).into());
    emit(out, "smp.json", ctx.header(), body)?;
    Ok(report.any_pass())
}

fn cmd_brute_force(ctx: &Context) -> Outcome {
    let out = ctx.out()?;
    let report = brute_force_search(&ctx.spec, ctx.args.intervals, ctx.args.grid_n, ctx.paths, ctx.seed, &ctx.control)?;
    write_brute_force_csv(&out.join("brute_force.csv"), &report)?;
    emit(out, "brute_force.json", ctx.header(), brute_force_json(&report))?;
    Ok(report.candidate_optimal)
}
