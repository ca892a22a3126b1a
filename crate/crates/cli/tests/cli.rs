use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

use slscs::central::{reference_settings, solve_centralized};
use slscs::fixtures::{path3, tiny2};
use slscs::io::InstanceFile;
use slscs::problem::CsProblem;

fn slscs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slscs")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn write_instance(dir: &Path, name: &str, cp: &CsProblem) -> PathBuf {
    let path = dir.join(name);
    InstanceFile::from_problem(cp, 0).save(&path).unwrap();
    path
}

/// Solves `instance` into `dir` and returns the solution path.
fn solve(dir: &Path, instance: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("solution.json");
    let mut args = vec!["solve", "--instance", s(instance), "--out-dir", s(dir)];
    args.extend_from_slice(extra);
    let res = slscs(&args);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    out
}

#[test]
fn default_generation_is_the_six_by_six_grid() {
    let dir = TempDir::new().unwrap();
    let res = slscs(&["generate", "--out-dir", s(dir.path())]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let inst = read_json(&dir.path().join("instance.json"));
    assert_eq!(inst["dims"].as_array().unwrap().len(), 36);
    assert_eq!(inst["horizon"], 10);
    // a spanning tree, stored in both directions
    assert_eq!(inst["graph"]["edges"].as_array().unwrap().len(), 2 * 35);
    assert!(String::from_utf8_lossy(&res.stdout).contains("36 subsystems, 35 edges"));
}

#[test]
fn generation_is_deterministic_in_the_seed() {
    let dir = TempDir::new().unwrap();
    let gen = |name: &str, seed: &str| {
        let path = dir.path().join(name);
        let res = slscs(&["generate", "--rows", "2", "--cols", "3", "--seed", seed, "--out", s(&path)]);
        assert_eq!(code(&res), 0, "{}", stderr(&res));
        fs::read(path).unwrap()
    };
    assert_eq!(gen("a.json", "7"), gen("b.json", "7"));
    assert_ne!(gen("a.json", "7"), gen("c.json", "8"));
}

#[test]
fn single_bus_grid_has_no_edges() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("one.json");
    let res = slscs(&["generate", "--rows", "1", "--cols", "1", "--out", s(&path)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let inst = read_json(&path);
    assert_eq!(inst["dims"].as_array().unwrap().len(), 1);
    assert!(inst["graph"]["edges"].as_array().unwrap().is_empty());
}

#[test]
fn central_solve_matches_the_library_and_verifies() {
    let dir = TempDir::new().unwrap();
    let cp = tiny2();
    let instance = write_instance(dir.path(), "tiny2.json", &cp);
    let solution = solve(dir.path(), &instance, &[]);
    let summary = read_json(&dir.path().join("summary.json"));
    let (_, rep) = solve_centralized(&cp, &reference_settings()).unwrap();
    let got = summary["objective"].as_f64().unwrap();
    assert!((got - rep.objective).abs() <= 1e-6 * rep.objective.abs());
    assert_eq!(summary["status"], "optimal");
    assert!(summary["terminal_mean_residual"].as_f64().unwrap() <= 1e-6);
    let res = slscs(&["verify", "--instance", s(&instance), "--solution", s(&solution)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
    let res = slscs(&["report", "--instance", s(&instance), "--solution", s(&solution)]);
    assert_eq!(code(&res), 0, "{}", stderr(&res));
}

#[test]
fn verify_names_a_locality_violation() {
    let dir = TempDir::new().unwrap();
    let local = write_instance(dir.path(), "d1.json", &path3());
    // a solution at radius 2 uses entries the radius-1 mask forbids
    let solution = solve(dir.path(), &local, &["--locality", "2"]);
    let res = slscs(&["verify", "--instance", s(&local), "--solution", s(&solution)]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("locality violated"), "{}", stderr(&res));
}

#[test]
fn verify_names_a_covariance_violation() {
    let dir = TempDir::new().unwrap();
    let instance = write_instance(dir.path(), "tiny2.json", &tiny2());
    let solution = solve(dir.path(), &instance, &[]);
    let mut inst = read_json(&instance);
    for v in inst["sigma_f"]["data"].as_array_mut().unwrap() {
        *v = Value::from(v.as_f64().unwrap() / 100.0);
    }
    let tight = dir.path().join("tight.json");
    fs::write(&tight, serde_json::to_string(&inst).unwrap()).unwrap();
    let res = slscs(&["verify", "--instance", s(&tight), "--solution", s(&solution)]);
    assert_eq!(code(&res), 2);
    assert!(stderr(&res).contains("LMI violated"), "{}", stderr(&res));
}

#[test]
fn simulate_writes_monte_carlo_only_when_asked() {
    let dir = TempDir::new().unwrap();
    let instance = write_instance(dir.path(), "tiny2.json", &tiny2());
    let solution = solve(dir.path(), &instance, &[]);
    let sim = |samples: &str, out: &Path| {
        let res = slscs(&[
            "simulate",
            "--instance",
            s(&instance),
            "--solution",
            s(&solution),
            "--samples",
            samples,
            "--out-dir",
            s(out),
        ]);
        assert_eq!(code(&res), 0, "{}", stderr(&res));
    };
    let analytic = dir.path().join("analytic");
    sim("0", &analytic);
    assert!(analytic.join("trajectory.csv").exists());
    assert!(!analytic.join("trajectory_mc.csv").exists());
    let summary = read_json(&analytic.join("simulate_summary.json"));
    assert!(summary["terminal_mean_residual"].as_f64().unwrap() <= 1e-6);
    assert!(summary["lmi_margin"].as_f64().unwrap() >= -1e-6);
    assert!(summary.get("monte_carlo").is_none());

    let sampled = dir.path().join("sampled");
    sim("5000", &sampled);
    let summary = read_json(&sampled.join("simulate_summary.json"));
    assert!(summary["monte_carlo"]["terminal_cov_gap"].as_f64().unwrap() <= 0.1);
    // same seed, same rollouts
    let again = dir.path().join("again");
    sim("5000", &again);
    for f in ["trajectory.csv", "trajectory_mc.csv"] {
        assert_eq!(fs::read(sampled.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn admm_writes_a_residual_trace() {
    let dir = TempDir::new().unwrap();
    let cp = tiny2();
    let instance = write_instance(dir.path(), "tiny2.json", &cp);
    solve(dir.path(), &instance, &["--method", "admm"]);
    let summary = read_json(&dir.path().join("summary.json"));
    assert_eq!(summary["method"], "admm");
    let iterations = summary["iterations"].as_u64().unwrap() as usize;
    let trace = fs::read_to_string(dir.path().join("residuals.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next().unwrap().split(',').next(), Some("iteration"));
    assert_eq!(lines.count(), iterations);
    let (_, rep) = solve_centralized(&cp, &reference_settings()).unwrap();
    let got = summary["objective"].as_f64().unwrap();
    assert!((got - rep.objective).abs() <= 1e-2 * rep.objective.abs(), "{got} vs {}", rep.objective);
}

#[test]
fn exit_codes_separate_usage_and_io_errors() {
    let dir = TempDir::new().unwrap();
    assert_eq!(code(&slscs(&["solve", "--no-such-flag"])), 1);
    assert_eq!(code(&slscs(&["solve", "--method", "newton"])), 1);
    let missing = dir.path().join("missing.json");
    let res = slscs(&["verify", "--instance", s(&missing), "--solution", s(&missing)]);
    assert_eq!(code(&res), 4, "{}", stderr(&res));
    let garbage = dir.path().join("garbage.json");
    fs::write(&garbage, "{\"format\": \"something-else\"}").unwrap();
    let res = slscs(&["verify", "--instance", s(&garbage), "--solution", s(&garbage)]);
    assert_eq!(code(&res), 4, "{}", stderr(&res));
}

#[test]
fn mismatched_solution_is_an_argument_error() {
    let dir = TempDir::new().unwrap();
    let small = write_instance(dir.path(), "tiny2.json", &tiny2());
    let big = write_instance(dir.path(), "path3.json", &path3());
    let solution = solve(dir.path(), &small, &[]);
    let res = slscs(&["verify", "--instance", s(&big), "--solution", s(&solution)]);
    assert_eq!(code(&res), 1, "{}", stderr(&res));
}
