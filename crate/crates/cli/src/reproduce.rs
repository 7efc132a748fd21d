//! End-to-end verification of the two built-in examples.

use std::f64::consts::LN_2;

use serde_json::{json, Value};

use varterm::adjoint::{k_tau, AdjointOptions, Backend};
use varterm::model::{load_problem, ProblemSpec};
use varterm::report::{num, nums};
use varterm::simulate::{simulate_ensemble, ControlProcess, TimeGrid};
use varterm::smp::{brute_force_search, check_smp, cost_functional, smp_json, solve_adjoints, write_smp_csv};
use varterm::terminal::{analyze, write_curve_csv, TerminalAnalysis};
use varterm::variation::{moment_check, moments_json, tau_rate_empirical, tau_rate_theoretical};

use crate::{emit, prepare_out, resolve_seed, zero_rate, Failure, Outcome, ReproduceArgs};

/// One checked quantity.
struct Criterion {
    name: &'static str,
    value: f64,
    target: f64,
    tolerance: f64,
    pass: bool,
}

impl Criterion {
    fn near(name: &'static str, value: f64, target: f64, tolerance: f64) -> Self {
        Criterion { name, value, target, tolerance, pass: (value - target).abs() <= tolerance }
    }

    fn at_least(name: &'static str, value: f64, floor: f64) -> Self {
        Criterion { name, value, target: floor, tolerance: 0.0, pass: value >= floor }
    }

    fn json(&self) -> Value {
        json!({
            "name": self.name,
            "value": num(self.value),
            "target": num(self.target),
            "tolerance": num(self.tolerance),
            "pass": self.pass,
        })
    }
}

pub fn run(args: &ReproduceArgs) -> Outcome {
    let spec = load_problem(&args.example)?;
    let seed = resolve_seed(args.common.seed, &spec)?;
    let out = prepare_out(&args.common.out)?;
    let (criteria, mut notes, extra) = match args.example.as_str() {
        "example1" => example1(&spec, seed, out)?,
        "example2" => example2(&spec, seed, out)?,
        other => return Err(Failure::Usage(format!("no reproduction recipe for `{other}`; use example1 or example2"))),
    };
    let pass = criteria.iter().all(|c| c.pass);
    notes.sort();
    let body = json!({
        "example": spec.name,
        "seed": seed,
        "criteria": criteria.iter().map(Criterion::json).collect::<Vec<_>>(),
        "notes": notes,
        "details": extra,
        "verdict": if pass { "pass" } else { "fail" },
    });
    emit(out, "reproduce.json", body, json!({}))?;
    Ok(pass)
}

fn candidate(spec: &ProblemSpec, steps: usize, paths: usize, seed: u64) -> Result<TerminalAnalysis, Failure> {
    let grid = TimeGrid::new(spec.horizon, steps)?;
    Ok(analyze(spec, &ControlProcess::constant(grid, &[1.0]), paths, seed)?)
}

type Recipe = (Vec<Criterion>, Vec<String>, Value);

fn example1(spec: &ProblemSpec, seed: u64, out: &std::path::Path) -> Result<Recipe, Failure> {
    let cand = candidate(spec, 100_000, 1, seed)?;
    write_curve_csv(&out.join("curve.csv"), &cand.curve, &cand.rate)?;
    let tau = cand.tau();
    let options = AdjointOptions { backend: Backend::Ode, degree: 3 };
    let adj = solve_adjoints(spec, &cand, options)?;
    let smp = check_smp(spec, &cand, &adj, 64)?;
    write_smp_csv(&out.join("smp.csv"), &smp)?;
    let lhs_end = smp.lhs(smp.tau_bar, &[2.0]).unwrap_or(f64::NAN);

    let spike_tau: f64 = 0.3;
    let exact_rate = (-spike_tau).exp();
    let rate = tau_rate_empirical(spec, &cand, &[2.0], spike_tau, &[0.02, 0.01, 0.005])?;
    let theory = tau_rate_theoretical(spec, &cand, &adj.constraint, &adj.constraint_second, spike_tau, &[2.0])?;
    let zero = zero_rate(spec, &cand, &adj.constraint, &adj.constraint_second, spike_tau, &[2.0])?;

    let brute = brute_force_search(spec, 10, 1000, 1, seed, &[1.0])?;
    let cost = cost_functional(spec, &cand.ensemble, tau);

    let criteria = vec![
        Criterion::near("terminal_time", tau, LN_2, 1e-4),
        Criterion::at_least("smp_min_lhs", smp.variants[0].min_lhs, -1e-6),
        Criterion::near("smp_lhs_at_tau_u2", lhs_end, 1.5, 1e-3),
        Criterion::near("rate_empirical", rate.extrapolated, exact_rate, 2e-3),
        Criterion::near("rate_theoretical", theory.mean, rate.extrapolated, 2e-3),
        Criterion::near("brute_force_best_index", brute.best as f64, 0.0, 0.0),
        Criterion::near("brute_force_best_cost", brute.best_row().cost, LN_2, 5e-3),
        Criterion::near("candidate_cost", cost.mean, LN_2, 5e-3),
    ];
    let notes = vec![
        format!(
            "zero constraint adjoint gives rate {} at tau = 0.3; the full adjoint equations give {}; both agree at the terminal time",
            fmt(zero),
            fmt(theory.mean)
        ),
    ];
    let extra = json!({
        "case": cand.case().tag(),
        "smp": smp_json(&smp),
        "rate_ladder": rate.entries.iter().map(|e| json!({
            "epsilon": num(e.effective_epsilon),
            "tau_eps": num(e.tau_eps),
            "slope": num(e.slope),
        })).collect::<Vec<_>>(),
        "rate_zero_adjoint": num(zero),
        "brute_force_controls": brute.rows.len(),
    });
    Ok((criteria, notes, extra))
}

fn example2(spec: &ProblemSpec, seed: u64, out: &std::path::Path) -> Result<Recipe, Failure> {
    let cand = candidate(spec, 100, 100_000, seed)?;
    write_curve_csv(&out.join("curve.csv"), &cand.curve, &cand.rate)?;
    let tau = cand.tau();
    let h_dev = cand.rate.values.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
    let identity_gap = (0..cand.curve.times.len())
        .map(|i| {
            let gap = (cand.curve.mean[i] - cand.curve.integrated_mean[i]).abs();
            gap - 3.0 * cand.curve.combined_se(i)
        })
        .fold(f64::NEG_INFINITY, f64::max);

    let options = AdjointOptions { backend: Backend::auto(spec), degree: 3 };
    let adj = solve_adjoints(spec, &cand, options)?;
    let mut criteria = vec![
        Criterion::near("terminal_time", tau, 0.5, 0.01),
        Criterion::near("constraint_rate_max_deviation", h_dev, 0.0, 0.0),
        Criterion::at_least("mean_identity_slack", -identity_gap, 0.0),
    ];
    for (name, t) in [("kernel_at_0.1", 0.1), ("kernel_at_0.25", 0.25), ("kernel_at_0.4", 0.4)] {
        let k = k_tau(spec, &cand.ensemble, t, &[2.0], &adj.constraint, &adj.constraint_second)?;
        criteria.push(Criterion::near(name, k.mean, 0.0, 3.0 * k.se_or_zero()));
    }

    let smp_cand = candidate(spec, 100, 10_000, seed)?;
    let smp_adj = solve_adjoints(spec, &smp_cand, options)?;
    let smp = check_smp(spec, &smp_cand, &smp_adj, 64)?;
    write_smp_csv(&out.join("smp.csv"), &smp)?;
    let worst = smp
        .taus
        .iter()
        .map(|t| (smp.lhs(*t, &[2.0]).unwrap_or(f64::NAN) - 1.0).abs())
        .fold(0.0, f64::max);
    criteria.push(Criterion::near("smp_lhs_u2_max_deviation", worst, 0.0, 0.02));
    criteria.push(Criterion::at_least("smp_min_lhs", smp.variants[0].min_lhs, -1e-6));

    let brute = brute_force_search(spec, 8, 32, 10_000, seed, &[1.0])?;
    criteria.push(Criterion::near("brute_force_best_index", brute.best as f64, 0.0, 0.0));
    criteria.push(Criterion::near("brute_force_best_cost", brute.best_row().cost, 0.5, 0.02));
    let cost = cost_functional(spec, &cand.ensemble, tau);
    criteria.push(Criterion::near("candidate_cost", cost.mean, 0.5, 0.02));

    let base = simulate_ensemble(spec, &ControlProcess::constant(TimeGrid::new(spec.horizon, 200)?, &[1.0]), 50_000, seed)?;
    let moments = moment_check(spec, &base, &[2.0], 0.2, &[0.1, 0.05, 0.025])?;
    criteria.push(Criterion::near("moment_ladder_bounded", if moments.bounded() { 1.0 } else { 0.0 }, 1.0, 0.0));

    let rate = tau_rate_empirical(spec, &cand, &[2.0], 0.2, &[0.02, 0.01, 0.005])?;
    let theory = tau_rate_theoretical(spec, &cand, &adj.constraint, &adj.constraint_second, 0.2, &[2.0])?;

    let notes = vec![
        "the first variation carries the spike's diffusion difference in the stochastic integral".to_string(),
    ];
    let extra = json!({
        "case": cand.case().tag(),
        "adjoint_backend": crate::backend_name(options.backend),
        "smp": smp_json(&smp),
        "moments": moments_json(&moments),
        "rate_empirical": num(rate.extrapolated),
        "rate_theoretical": num(theory.mean),
        "brute_force_best_control": brute.best_row().control.iter().map(|u| nums(u)).collect::<Vec<_>>(),
        "brute_force_taus": {
            "min": num(brute.rows.iter().map(|r| r.tau).fold(f64::INFINITY, f64::min)),
            "max": num(brute.rows.iter().map(|r| r.tau).fold(f64::NEG_INFINITY, f64::max)),
        },
    });
    Ok((criteria, notes, extra))
}

fn fmt(v: f64) -> String {
    varterm::report::fmt_f64(v)
}
