//! `stackleq`: solve, simulate and verify time-consistent Stackelberg
//! equilibria from the command line.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 usage error, 3 invalid problem or
//! configuration, 4 solver failure (singular or finite escape), 5 a
//! verification check failed.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stackleq::follower::SolverOptions;
use stackleq::leader::{solve_equilibrium, write_pibar_csv, Equilibrium};
use stackleq::problem::{validate, ValidationOptions};
use stackleq::simulate::{simulate_equilibrium, SimConfig};
use stackleq::twotime::TriField;
use stackleq::verify::{run_all, SolveSummary, VerifyConfig};
use stackleq::{Error, GridSpec, ProblemSpec};

#[derive(Parser)]
#[command(name = "stackleq", version, about = "Time-consistent LQ mean-field Stackelberg equilibria")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check the positivity conditions on the grid.
    Validate(Common),
    /// Solve both players' Riccati systems and write fields and gains.
    Solve(Common),
    /// Write the closed-loop gain schedules.
    Gains(Common),
    /// Monte Carlo simulation of the equilibrium.
    Simulate(Common),
    /// Run every verification check and write a JSON report.
    Verify(Common),
    /// Two-column CSVs of every Riccati component, for plotting.
    ExportPlot(Common),
}

#[derive(Args)]
struct Common {
    /// Built-in problem: case1 or case2.
    #[arg(long, conflicts_with = "problem", required_unless_present = "problem")]
    preset: Option<String>,
    /// Problem file (JSON).
    #[arg(long)]
    problem: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    #[arg(long, default_value_t = 10_000)]
    paths: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Output directory; STACKLEQ_OUT takes precedence.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads for Monte Carlo.
    #[arg(long)]
    threads: Option<usize>,
    /// Spike lengths for verify.
    #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.05, 0.025])]
    epsilons: Vec<f64>,
    /// Keep only diagonals and the first column of the two-time fields.
    #[arg(long)]
    reduced_memory: bool,
    /// Write per-path trajectories from simulate.
    #[arg(long)]
    export_paths: bool,
}

enum Failure {
    Io(String),
    Invalid(String),
    Solver(String),
    Verification(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Io(_) => 1,
            Failure::Invalid(_) => 3,
            Failure::Solver(_) => 4,
            Failure::Verification(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Io(m) | Failure::Invalid(m) | Failure::Solver(m) | Failure::Verification(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::NotSolved { .. }
            | Error::SingularS { .. }
            | Error::SingularRhat { .. }
            | Error::NonFinitePath { .. }
            | Error::ShootingFailure { .. } => Failure::Solver(msg),
            Error::Io(_) => Failure::Io(msg),
            _ => Failure::Invalid(msg),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn run(cmd: Command) -> Outcome {
    let (Command::Validate(c)
    | Command::Solve(c)
    | Command::Gains(c)
    | Command::Simulate(c)
    | Command::Verify(c)
    | Command::ExportPlot(c)) = &cmd;
    if let Some(n) = c.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Failure::Invalid(e.to_string()))?;
    }
    let spec = load_spec(c)?;
    let grid = GridSpec::for_spec(&spec, c.dt)?;
    let out = out_dir(c)?;
    check_valid(&spec, &grid, &out)?;
    match &cmd {
        Command::Validate(_) => {
            println!("valid");
            Ok(())
        }
        Command::Solve(_) => solve(&spec, &grid, c, &out),
        Command::Gains(_) => gains(&spec, &grid, &out),
        Command::Simulate(_) => simulate(&spec, &grid, c, &out),
        Command::Verify(_) => verify(&spec, c, &out),
        Command::ExportPlot(_) => export_plot(&spec, &grid, &out),
    }
}

fn load_spec(c: &Common) -> Result<ProblemSpec, Failure> {
    match (&c.preset, &c.problem) {
        (Some(name), _) => Ok(ProblemSpec::preset(name)?),
        (None, Some(path)) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
            Ok(ProblemSpec::from_json(&text)?)
        }
        (None, None) => Err(Failure::Invalid("one of --preset or --problem is required".into())),
    }
}

fn out_dir(c: &Common) -> Result<PathBuf, Failure> {
    let dir = std::env::var_os("STACKLEQ_OUT").map(PathBuf::from).unwrap_or_else(|| c.out.clone());
    fs::create_dir_all(&dir).map_err(|e| Failure::Io(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, Failure> {
    let path = dir.join(name);
    File::create(&path).map(BufWriter::new).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn write_json(dir: &Path, name: &str, value: &impl serde::Serialize) -> Outcome {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Failure::Io(e.to_string()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn check_valid(spec: &ProblemSpec, grid: &GridSpec, out: &Path) -> Outcome {
    let report = validate(spec, grid, &ValidationOptions::default())?;
    write_json(out, "validation.json", &report)?;
    if report.passed {
        return Ok(());
    }
    let lines: Vec<String> = report
        .failures()
        .map(|c| {
            format!("{} fails at (s={}, t={}): min eigenvalue {:e}", c.condition, c.at_s, c.at_t, c.min_eigenvalue)
        })
        .collect();
    Err(Failure::Invalid(format!("problem is not admissible:\n  {}", lines.join("\n  "))))
}

fn solver_options(c: &Common) -> SolverOptions {
    if c.reduced_memory {
        SolverOptions::reduced(&[0])
    } else {
        SolverOptions::default()
    }
}

fn equilibrium(spec: &ProblemSpec, grid: &GridSpec, opts: &SolverOptions) -> Result<Equilibrium, Failure> {
    Ok(solve_equilibrium(spec, grid, opts)?)
}

fn write_field(out: &Path, prefix: &str, f: &TriField) -> Outcome {
    if f.is_full() {
        let mut w = create(out, &format!("{prefix}.csv"))?;
        f.write_csv(&mut w)?;
        w.flush()?;
    }
    let mut w = create(out, &format!("{prefix}_diag.csv"))?;
    f.write_diagonal_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn solve(spec: &ProblemSpec, grid: &GridSpec, c: &Common, out: &Path) -> Outcome {
    let eq = equilibrium(spec, grid, &solver_options(c))?;
    for (name, f) in [
        ("follower_P", &eq.follower.p),
        ("follower_Z", &eq.follower.z),
        ("follower_Phat", &eq.follower.phat),
        ("leader_P", &eq.leader.p),
        ("leader_Z", &eq.leader.z),
        ("leader_Phat", &eq.leader.phat),
    ] {
        write_field(out, name, f)?;
    }
    write_gains(&eq, out)?;
    let summary = SolveSummary::new(&eq.follower, &eq.leader);
    write_json(out, "status.json", &summary)?;
    println!(
        "solved: dt = {}, max|P| = {:.6e} (follower), {:.6e} (leader)",
        grid.dt, summary.follower_max_p, summary.leader_max_p
    );
    Ok(())
}

fn write_gains(eq: &Equilibrium, out: &Path) -> Outcome {
    let mut w = create(out, "gains.csv")?;
    eq.gains.write_csv(&mut w)?;
    w.flush()?;
    let mut w = create(out, "pibar.csv")?;
    write_pibar_csv(&mut w, &eq.leader)?;
    w.flush()?;
    Ok(())
}

fn gains(spec: &ProblemSpec, grid: &GridSpec, out: &Path) -> Outcome {
    let eq = equilibrium(spec, grid, &SolverOptions::reduced(&[0]))?;
    write_gains(&eq, out)?;
    println!("gains written for {} nodes", grid.nodes());
    Ok(())
}

fn simulate(spec: &ProblemSpec, grid: &GridSpec, c: &Common, out: &Path) -> Outcome {
    let eq = equilibrium(spec, grid, &SolverOptions::reduced(&[0]))?;
    let cfg = SimConfig { paths: c.paths, seed: c.seed, store_paths: c.export_paths, ..SimConfig::default() };
    let res = simulate_equilibrium(&eq.disc, &eq.gains, &spec.x0, &cfg)?;
    let mut w = create(out, "summary.csv")?;
    res.write_summary_csv(&mut w)?;
    w.flush()?;
    write_gains(&eq, out)?;
    if c.export_paths {
        let mut w = create(out, "paths.csv")?;
        res.write_paths_csv(&mut w)?;
        w.flush()?;
    }
    println!("J1 = {:.6e} (se {:.2e})", res.j1.mean, res.j1.se);
    println!("J2 = {:.6e} (se {:.2e})", res.j2.mean, res.j2.se);
    Ok(())
}

fn verify(spec: &ProblemSpec, c: &Common, out: &Path) -> Outcome {
    let defaults = VerifyConfig::default();
    let cfg = VerifyConfig {
        dt: c.dt,
        sim: SimConfig { paths: c.paths, seed: c.seed, ..defaults.sim },
        epsilons: c.epsilons.clone(),
        delta: defaults.delta,
    };
    let report = run_all(spec, &cfg)?;
    let mut w = create(out, "verify_report.json")?;
    report.write_json(&mut w)?;
    w.flush()?;
    print!("{}", report.summary());
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Verification("one or more checks failed; see verify_report.json".into()))
    }
}

fn export_plot(spec: &ProblemSpec, grid: &GridSpec, out: &Path) -> Outcome {
    let eq = equilibrium(spec, grid, &SolverOptions::reduced(&[0]))?;
    let dir = out.join("plot");
    fs::create_dir_all(&dir)?;
    for (name, f) in [
        ("follower_P", &eq.follower.p),
        ("follower_Z", &eq.follower.z),
        ("leader_P", &eq.leader.p),
        ("leader_Z", &eq.leader.z),
    ] {
        let (rows, cols) = f.block_shape();
        for (tag, series) in [("diag", f.diagonal()?), ("t0", f.column(0)?)] {
            for r in 0..rows {
                for q in 0..cols {
                    let file = format!("{name}_{}{}_{tag}.csv", r + 1, q + 1);
                    let mut w = create(&dir, &file)?;
                    let label = if tag == "diag" { "s,F(s;s)" } else { "s,F(s;t0)" };
                    writeln!(w, "# {name}[{},{}] {label}", r + 1, q + 1)?;
                    for (i, m) in series.iter().enumerate() {
                        writeln!(w, "{},{}", grid.time(i), m[(r, q)])?;
                    }
                    w.flush()?;
                }
            }
        }
    }
    println!("plot data written to {}", dir.display());
    Ok(())
}
