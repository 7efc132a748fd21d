use std::fs;
use std::path::Path;

use serde_json::Value;

fn run(args: &[&str], out: &Path) -> i32 {
    let mut argv = vec!["varterm"];
    argv.extend_from_slice(args);
    argv.extend_from_slice(&["--out", out.to_str().unwrap()]);
    varterm_cli::run(argv)
}

fn report(out: &Path, name: &str) -> Value {
    serde_json::from_slice(&fs::read(out.join(name)).unwrap()).unwrap()
}

#[test]
fn reproduce_example1_passes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&["reproduce", "example1"], tmp.path()), 0);
    let body = report(tmp.path(), "reproduce.json");
    assert_eq!(body["verdict"], "pass");
    assert_eq!(body["details"]["case"], "i");
    assert!(body["criteria"].as_array().unwrap().iter().all(|c| c["pass"] == true));
    assert!(tmp.path().join("smp.csv").exists());
}

#[test]
fn unknown_problem_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&["tau", "--problem", "nosuch"], tmp.path()), 2);
    assert_eq!(run(&["reproduce", "lq-linear"], tmp.path()), 2);
}

#[test]
fn bad_flags_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&["tau", "--problem", "example1", "--workers", "0"], tmp.path()), 2);
    assert_eq!(run(&["tau", "--problem", "example1", "--grid-n", "many"], tmp.path()), 2);
    assert_eq!(run(&["tau", "--problem", "example1", "--backend", "spline"], tmp.path()), 2);
    assert_eq!(run(&["launch", "--problem", "example1"], tmp.path()), 2);
    assert_eq!(run(&["rate", "--problem", "example1", "--spike-u", "3"], tmp.path()), 2);
}

#[test]
fn problem_file_without_seed_needs_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("drift.toml");
    fs::write(
        &file,
        "[problem]\nm = 1\nd = 1\nk = 1\nT = 1.0\nalpha = 0.5\nx0 = 0.0\n\n\
         [coefficients]\nb = \"u\"\nsigma = \"0\"\nf = \"u\"\ng = \"0\"\nphi = \"x\"\n\n\
         [control]\nkind = \"finite\"\npoints = [1.0, 2.0]\n",
    )
    .unwrap();
    let problem = file.to_str().unwrap();
    let out = tmp.path().join("out");
    assert_eq!(run(&["tau", "--problem", problem, "--grid-n", "100"], &out), 2);
    assert_eq!(run(&["tau", "--problem", problem, "--grid-n", "100", "--seed", "3"], &out), 0);
    let tau = report(&out, "tau.json");
    assert_eq!(tau["case"], "i");
    assert!((tau["tau"].as_f64().unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn check_smp_on_example1() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(&["check-smp", "--problem", "example1", "--grid-n", "10000", "--tau-grid", "16"], tmp.path()), 0);
    let body = report(tmp.path(), "smp.json");
    assert_eq!(body["case"], "i");
    let csv = fs::read_to_string(tmp.path().join("smp.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "tau,u,lhs,se,variant");
}

#[test]
fn adjoint_writes_all_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["adjoint", "--problem", "lq-linear", "--grid-n", "50", "--paths", "500", "--backend", "ode"];
    assert_eq!(run(&args, tmp.path()), 0);
    let names: Vec<String> = fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names.iter().filter(|n| n.ends_with(".csv")).count(), 4, "{names:?}");
    assert!(names.contains(&"adjoint.json".to_string()));
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["rate", "--problem", "example2", "--grid-n", "100", "--paths", "2000", "--seed", "11"];
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run(&[&args[..], &["--workers", "1"]].concat(), &a);
    run(&[&args[..], &["--workers", "4"]].concat(), &b);
    assert_eq!(fs::read(a.join("rate.json")).unwrap(), fs::read(b.join("rate.json")).unwrap());
    assert_eq!(fs::read(a.join("rate.csv")).unwrap(), fs::read(b.join("rate.csv")).unwrap());
}
