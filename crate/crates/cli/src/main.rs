//! `slscs`: generate swing-grid instances, solve them centrally or by
//! consensus ADMM, simulate the closed loop and verify solutions.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use slscs::central::{solve_centralized, solve_transformed};
use slscs::config::{InstanceSource, RunConfig};
use slscs::conic::Backend;
use slscs::consensus::{self, IterationRecord};
use slscs::experiment::generate;
use slscs::io::{InstanceFile, Method, RunReport, SolutionFile};
use slscs::linalg::min_eigenvalue;
use slscs::problem::{terminal_covariance, terminal_mean_residual, CsProblem};
use slscs::sim::{analytic_stats, monte_carlo, write_trajectory_csv};
use slscs::verify::{first_failure, verify};
use slscs::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_VERIFY: u8 = 2;
const EXIT_SOLVER: u8 = 3;
const EXIT_IO: u8 = 4;

/// Thread count for the rollout and subproblem pools.
const THREADS_ENV: &str = "SLSCS_THREADS";

#[derive(Parser, Debug)]
#[command(name = "slscs", version, about = "Localized covariance steering for networked stochastic systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a swing-grid instance and write it as JSON.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Instance file to write (default: <out-dir>/instance.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve an instance and write the solution and a summary.
    Solve {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Instance file; generated from the configuration when omitted.
        #[arg(long)]
        instance: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = MethodArg::Central)]
        method: MethodArg,
        /// Solution file to write (default: <out-dir>/solution.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-loop moments (and optional Monte-Carlo rollouts) as CSV.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        solution: PathBuf,
    },
    /// Check a solution against every constraint of its instance.
    Verify {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        solution: PathBuf,
    },
    /// Print a short human-readable account of a solution.
    Report {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        solution: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Central,
    CentralTransformed,
    Admm,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Central => Method::Central,
            MethodArg::CentralTransformed => Method::CentralTransformed,
            MethodArg::Admm => Method::Admm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendArg {
    Internal,
    Clarabel,
}

/// Configuration file plus per-field overrides.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// TOML run configuration; every field is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Locality radius `d`.
    #[arg(long)]
    locality: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Monte-Carlo rollouts; 0 gives analytic moments only.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Failure> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.rows {
            cfg.instance.rows = v;
        }
        if let Some(v) = self.cols {
            cfg.instance.cols = v;
        }
        if let Some(v) = self.horizon {
            cfg.instance.horizon = v;
        }
        if let Some(v) = self.locality {
            cfg.instance.locality = v;
        }
        if let Some(v) = self.rho {
            cfg.admm.rho = v;
        }
        if let Some(v) = self.eps {
            cfg.admm.eps = v;
        }
        if let Some(v) = self.max_iter {
            cfg.admm.max_iter = v;
        }
        if let Some(b) = self.backend {
            cfg.solver.backend = match b {
                BackendArg::Internal => Backend::Internal,
                BackendArg::Clarabel => Backend::Clarabel,
            };
        }
        if let Some(v) = self.samples {
            cfg.sim.samples = v;
        }
        if let Some(v) = &self.out_dir {
            cfg.output.dir = v.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io(_) | Error::Format(_) => EXIT_IO,
            Error::Solver { .. } => EXIT_SOLVER,
            _ => EXIT_USAGE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

fn io_context(path: &Path) -> impl FnOnce(Error) -> Failure + '_ {
    move |e| {
        let mut f = Failure::from(e);
        f.message = format!("{}: {}", path.display(), f.message);
        f
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_context(path)(e.into()))?;
    }
    fs::write(path, contents).map_err(|e| io_context(path)(e.into()))
}

fn load_instance(path: &Path) -> Result<(InstanceFile, CsProblem), Failure> {
    let file = InstanceFile::load(path).map_err(io_context(path))?;
    let cp = file.problem().map_err(io_context(path))?;
    Ok((file, cp))
}

fn load_solution(path: &Path) -> Result<SolutionFile, Failure> {
    SolutionFile::load(path).map_err(io_context(path))
}

fn pretty(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json values serialize");
    s.push('\n');
    s
}

fn cmd_generate(args: &ConfigArgs, out: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = args.load()?;
    let inst = generate(&cfg)?;
    let path = out.unwrap_or_else(|| cfg.output.dir.join("instance.json"));
    write_file(&path, &InstanceFile::from_instance(&inst, Some(&cfg)).to_json()?)?;
    println!(
        "wrote {} ({} subsystems, {} edges, T={})",
        path.display(),
        inst.problem.num_subsystems(),
        inst.problem.graph.undirected_pairs().len(),
        inst.problem.horizon()
    );
    Ok(())
}

const RESIDUAL_CSV_HEADER: &str = "iteration,res_x,res_u,change,min_objective,max_objective,inner_iterations,flagged";

fn residual_csv(history: &[IterationRecord]) -> String {
    let mut s = String::from(RESIDUAL_CSV_HEADER);
    s.push('\n');
    for r in history {
        let lo = r.objectives.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = r.objectives.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        s.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{}\n",
            r.iteration,
            r.res_x,
            r.res_u,
            r.change,
            lo,
            hi,
            r.inner_iterations,
            r.flagged.len()
        ));
    }
    s
}

fn cmd_solve(args: &ConfigArgs, instance: Option<PathBuf>, method: MethodArg, out: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = args.load()?;
    let instance = instance.or_else(|| match cfg.instance.source {
        InstanceSource::Load => cfg.instance.path.clone(),
        InstanceSource::Generate => None,
    });
    let (seed, mut cp) = match &instance {
        Some(p) => {
            let (file, cp) = load_instance(p)?;
            (file.seed, cp)
        }
        None => (cfg.seed, generate(&cfg)?.problem),
    };
    if args.locality.is_some() {
        cp = cp.with_locality(cfg.instance.locality)?;
    }
    let (pair, report) = match method {
        MethodArg::Central => {
            let (p, r) = solve_centralized(&cp, &cfg.central_settings())?;
            (p, RunReport::Conic(r))
        }
        MethodArg::CentralTransformed => {
            let (p, r) = solve_transformed(&cp, &cfg.central_settings())?;
            (p, RunReport::Conic(r))
        }
        MethodArg::Admm => {
            let (p, r) = consensus::run(&cp, &cfg.admm_options())?;
            write_file(&cfg.output.dir.join("residuals.csv"), &residual_csv(&r.history))?;
            (p, RunReport::Admm(r))
        }
    };
    let path = out.unwrap_or_else(|| cfg.output.dir.join("solution.json"));
    let sol = SolutionFile::new(&pair, method.into(), seed, report);
    write_file(&path, &sol.to_json()?)?;

    let (objective, iterations, wall, extra) = match &sol.report {
        RunReport::Conic(r) => (
            r.objective,
            r.iterations,
            r.wall_time_s,
            json!({"primal_residual": r.primal_residual, "psd_residual": r.psd_residual, "diagnosis": r.diagnosis}),
        ),
        RunReport::Admm(r) => {
            let last = r.history.last();
            (
                r.objective,
                r.iterations,
                r.wall_time_s,
                json!({
                    "res_x": last.map(|l| l.res_x),
                    "res_u": last.map(|l| l.res_u),
                    "parametrization_residual": r.parametrization_residual,
                    "max_pairwise_deviation": r.max_pairwise_deviation,
                    "used_fallback": r.used_fallback,
                }),
            )
        }
    };
    let summary = json!({
        "method": method_name(method),
        "status": sol.report.status(),
        "objective": objective,
        "iterations": iterations,
        "wall_time_s": wall,
        "terminal_mean_residual": terminal_mean_residual(&pair, &cp.noise, &cp.terminal),
        "residuals": extra,
    });
    write_file(&cfg.output.dir.join("summary.json"), &pretty(&summary))?;
    print!("{}", pretty(&summary));
    if !sol.report.succeeded() {
        return Err(Failure {
            code: EXIT_SOLVER,
            message: format!("solver finished with status {}; solution written to {}", sol.report.status(), path.display()),
        });
    }
    Ok(())
}

fn method_name(m: MethodArg) -> String {
    Method::from(m).to_string()
}

fn cmd_simulate(args: &ConfigArgs, instance: &Path, solution: &Path) -> Result<(), Failure> {
    let cfg = args.load()?;
    let (_, cp) = load_instance(instance)?;
    let pair = load_solution(solution)?.pair_for(&cp)?;
    let stats = analytic_stats(&pair, &cp)?;
    let dir = &cfg.output.dir;
    let mut buf = Vec::new();
    write_trajectory_csv(&mut buf, &stats, cp.network.dims())?;
    write_file(&dir.join("trajectory.csv"), &String::from_utf8(buf).expect("csv is ascii"))?;

    let gap = &cp.terminal.sigma_f - terminal_covariance(&pair, &cp.noise);
    let mut summary = json!({
        "terminal_mean_residual": terminal_mean_residual(&pair, &cp.noise, &cp.terminal),
        "lmi_margin": min_eigenvalue(&gap),
        "deviation_initial": stats.deviation[0],
        "deviation_final": stats.deviation[stats.horizon()],
    });
    if cfg.sim.samples > 0 {
        let mc = monte_carlo(&pair, &cp, cfg.sim.samples, cfg.seed.wrapping_add(cfg.sim.seed_offset))?;
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &mc.empirical, cp.network.dims())?;
        write_file(&dir.join("trajectory_mc.csv"), &String::from_utf8(buf).expect("csv is ascii"))?;
        summary["monte_carlo"] = json!({
            "samples": mc.samples,
            "max_cov_gap": mc.max_cov_gap,
            "terminal_cov_gap": mc.terminal_cov_gap,
        });
    }
    write_file(&dir.join("simulate_summary.json"), &pretty(&summary))?;
    print!("{}", pretty(&summary));
    Ok(())
}

fn cmd_verify(instance: &Path, solution: &Path) -> Result<(), Failure> {
    let (_, cp) = load_instance(instance)?;
    let pair = load_solution(solution)?.pair_for(&cp)?;
    let checks = verify(&cp, &pair);
    for c in &checks {
        println!(
            "{:<5} {:<26} {:.3e} (limit {:.1e})",
            if c.passed { "ok" } else { "FAIL" },
            c.name,
            c.value,
            c.threshold
        );
    }
    match first_failure(&checks) {
        Some(c) => Err(Failure {
            code: EXIT_VERIFY,
            message: format!("{} violated: {:.3e} > {:.1e}", c.name, c.value, c.threshold),
        }),
        None => Ok(()),
    }
}

fn cmd_report(instance: &Path, solution: &Path) -> Result<(), Failure> {
    let (file, cp) = load_instance(instance)?;
    let sol = load_solution(solution)?;
    let pair = sol.pair_for(&cp)?;
    let stats = analytic_stats(&pair, &cp)?;
    let mut out = std::io::stdout().lock();
    writeln!(
        out,
        "instance: {} subsystems, n={}, m={}, T={}, d={}, seed {}",
        cp.num_subsystems(),
        cp.n(),
        cp.m(),
        cp.horizon(),
        cp.locality,
        file.seed
    )?;
    writeln!(out, "method:   {} ({})", sol.method, sol.report.status())?;
    writeln!(out, "objective {:.8e}", cp.objective(&pair))?;
    if let RunReport::Admm(r) = &sol.report {
        writeln!(out, "admm:     {} iterations, rho {}, eps {}", r.iterations, r.rho, r.eps)?;
    }
    let first = stats.deviation[0];
    let last = stats.deviation[stats.horizon()];
    let m0 = stats.mean_traj[0].norm();
    let mt = stats.terminal_mean().norm();
    writeln!(out, "mean norm: t=0 {m0:.4e}  t=T {mt:.4e}")?;
    writeln!(out, "deviation from Sigma_f     t=0          t=T          ratio")?;
    for (name, a, b) in [
        ("spectral", first.spectral, last.spectral),
        ("frobenius", first.frobenius, last.frobenius),
        ("nuclear", first.nuclear, last.nuclear),
    ] {
        writeln!(out, "  {name:<24} {a:.4e}   {b:.4e}   {:.4}", b / a)?;
    }
    for c in verify(&cp, &pair) {
        writeln!(out, "check {:<26} {}", c.name, if c.passed { "ok" } else { "FAIL" })?;
    }
    Ok(())
}

fn init_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| Failure {
        code: EXIT_USAGE,
        message: format!("{THREADS_ENV} must be a positive integer, got '{v}'"),
    })?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure {
        code: EXIT_USAGE,
        message: format!("cannot size the thread pool: {e}"),
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    init_threads()?;
    match cli.command {
        Command::Generate { cfg, out } => cmd_generate(&cfg, out),
        Command::Solve {
            cfg,
            instance,
            method,
            out,
        } => cmd_solve(&cfg, instance, method, out),
        Command::Simulate { cfg, instance, solution } => cmd_simulate(&cfg, &instance, &solution),
        Command::Verify { instance, solution } => cmd_verify(&instance, &solution),
        Command::Report { instance, solution } => cmd_report(&instance, &solution),
    }
}

fn main() -> ExitCode {
    // clap's own usage-error code (2) would collide with a verification failure
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
