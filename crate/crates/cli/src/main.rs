use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use relaxgap::chattering::{chattering_error, ChatteringReport};
use relaxgap::classical::{solve_classical, SolveOptions};
use relaxgap::conditions::{run_checks, Check, DEFAULT_ETA};
use relaxgap::dynamics::{default_dt, integrate_classical, integrate_young, total_cost, ControlRef};
use relaxgap::gap::{gap_bound, GapOptions, DEFAULT_LADDER};
use relaxgap::occmeas::{assemble_lp, liouville_residual, GridSpec};
use relaxgap::problem::{load_problem, ClassicalControl, Closure, Problem, YoungMeasureControl};

#[derive(Parser)]
#[command(name = "relaxgap", version, about = "Relaxations and relaxation gaps of constrained optimal control problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the occupation-measure LP.
    SolveRelaxed {
        problem: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
        /// Shrink Ω and X by this amount first.
        #[arg(long, default_value_t = 0.0)]
        eps: f64,
        #[arg(long, default_value_t = Closure::Closed)]
        mode: Closure,
        /// Report JSON destination (standard output if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Nonzero occupation-measure cells as CSV.
        #[arg(long)]
        measure_csv: Option<PathBuf>,
        /// Nonzero terminal-measure cells as CSV.
        #[arg(long)]
        boundary_csv: Option<PathBuf>,
    },
    /// Multistart direct search over piecewise-constant controls.
    SolveClassical {
        problem: PathBuf,
        #[arg(long, default_value_t = 50)]
        k: usize,
        #[arg(long, default_value_t = 16)]
        starts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = Closure::Closed)]
        mode: Closure,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Trajectory of the best control as CSV.
        #[arg(long)]
        trajectory_csv: Option<PathBuf>,
    },
    /// Chatter a Young-measure control and measure the approximation error.
    Chatter {
        problem: PathBuf,
        #[arg(long)]
        young: PathBuf,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample-based checks of the no-gap conditions.
    Check {
        problem: PathBuf,
        /// Comma-separated subset of fw1, fw2, h1, ipc, v4.
        #[arg(long, value_delimiter = ',', default_value = "fw1,fw2,h1,ipc,v4")]
        which: Vec<Check>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_ETA)]
        eta: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gap estimate from inner approximations of Ω and X.
    GapBound {
        problem: PathBuf,
        /// Strictly decreasing list of ε values.
        #[arg(long, value_delimiter = ',')]
        ladder: Option<Vec<f64>>,
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long, default_value_t = 8)]
        starts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = Closure::Closed)]
        mode: Closure,
        #[arg(long)]
        out: Option<PathBuf>,
        /// `epsilon,upper_shrunk,lower_full,gap_bound` table.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Liouville residual of the trajectory of a classical or Young control.
    Residual {
        problem: PathBuf,
        #[arg(long)]
        control: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the occupation LP as sparse triplets.
    ExportLp {
        problem: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long, default_value_t = 0.0)]
        eps: f64,
        #[arg(long, default_value_t = Closure::Closed)]
        mode: Closure,
    },
}

#[derive(Args)]
struct GridArgs {
    #[arg(long, default_value_t = 20)]
    nt: usize,
    /// Cells per state dimension.
    #[arg(long, default_value_t = 40)]
    nx: usize,
    /// Nodes per control dimension, endpoints included.
    #[arg(long, default_value_t = 21)]
    nu: usize,
    /// Total degree of the monomial test functions.
    #[arg(long, default_value_t = 4)]
    degree: u32,
}

impl GridArgs {
    fn spec(&self, p: &Problem) -> GridSpec {
        GridSpec::uniform(p, self.nt, self.nx, self.nu, self.degree)
    }
}

/// Failure classes mapped to exit codes.
enum Failure {
    Input(anyhow::Error),
    Solver(anyhow::Error),
}

trait Classify<T> {
    fn input(self) -> Result<T, Failure>;
    fn solver(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn input(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Input(e.into()))
    }
    fn solver(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Solver(e.into()))
    }
}

#[derive(Serialize)]
struct RelaxedReport {
    problem: String,
    grid: GridSpec,
    mode: Closure,
    eps: f64,
    objective: f64,
    total_mass: f64,
    boundary_mass: f64,
    max_residual: f64,
    iterations: usize,
}

#[derive(Serialize)]
struct ChatterOutput {
    control: ClassicalControl,
    error: ChatteringReport,
}

#[derive(Serialize)]
struct ResidualReport {
    problem: String,
    grid: GridSpec,
    dt: f64,
    residual: f64,
    cost: f64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ControlFile {
    Young(YoungMeasureControl),
    Classical(ClassicalControl),
}

fn load(path: &Path) -> Result<Problem, Failure> {
    load_problem(path).with_context(|| format!("cannot load problem `{}`", path.display())).input()
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Failure> {
    let src = fs::read_to_string(path).with_context(|| format!("cannot read `{}`", path.display())).input()?;
    let de = &mut serde_json::Deserializer::from_str(&src);
    serde_path_to_error::deserialize(de).with_context(|| format!("invalid JSON in `{}`", path.display())).input()
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).with_context(|| format!("cannot write `{}`", path.display())).input()
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Solver(e.into()))?;
    text.push('\n');
    match out {
        Some(path) => write_file(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn positive_dt(dt: Option<f64>, p: &Problem) -> Result<f64, Failure> {
    match dt {
        Some(d) if !(d > 0.0 && d.is_finite()) => Err(Failure::Input(anyhow!("--dt must be positive, got {d}"))),
        Some(d) => Ok(d),
        None => Ok(default_dt(p)),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::SolveRelaxed { problem, grid, eps, mode, out, measure_csv, boundary_csv } => {
            let p = load(&problem)?;
            let spec = grid.spec(&p);
            spec.validate(&p).input()?;
            let m = assemble_lp(&p, &spec, mode, eps).input()?.solve().solver()?;
            if let Some(path) = measure_csv {
                write_file(&path, &m.to_csv())?;
            }
            if let Some(path) = boundary_csv {
                write_file(&path, &m.boundary_csv())?;
            }
            let report = RelaxedReport {
                problem: p.name.clone(),
                grid: spec,
                mode,
                eps,
                objective: m.objective,
                total_mass: m.total_mass(),
                boundary_mass: m.boundary_mass(),
                max_residual: m.max_residual,
                iterations: m.iterations,
            };
            emit(&report, out.as_deref())
        }
        Command::SolveClassical { problem, k, starts, seed, mode, dt, out, trajectory_csv } => {
            let p = load(&problem)?;
            let mut opts = SolveOptions::new(k, starts, seed, mode);
            opts.dt = Some(positive_dt(dt, &p)?);
            if k == 0 || starts == 0 {
                return Err(Failure::Input(anyhow!("--k and --starts must be at least 1")));
            }
            let r = solve_classical(&p, &opts).solver()?;
            if let Some(path) = trajectory_csv {
                let tr = integrate_classical(&p, &r.control, opts.dt.unwrap()).solver()?;
                write_file(&path, &tr.to_csv())?;
            }
            emit(&r, out.as_deref())
        }
        Command::Chatter { problem, young, n, dt, out } => {
            let p = load(&problem)?;
            let y: YoungMeasureControl = read_json(&young)?;
            let y = YoungMeasureControl::new(y.time_grid, y.atoms, y.weights).input()?;
            y.validate_for(&p).input()?;
            if n == 0 {
                return Err(Failure::Input(anyhow!("--n must be at least 1")));
            }
            let (control, error) = chattering_error(&p, &y, n, positive_dt(dt, &p)?).solver()?;
            emit(&ChatterOutput { control, error }, out.as_deref())
        }
        Command::Check { problem, which, seed, eta, out } => {
            let p = load(&problem)?;
            if !(eta >= 0.0) {
                return Err(Failure::Input(anyhow!("--eta must be nonnegative")));
            }
            emit(&run_checks(&p, &which, eta, seed), out.as_deref())
        }
        Command::GapBound { problem, ladder, grid, k, starts, seed, mode, out, csv } => {
            let p = load(&problem)?;
            let spec = grid.spec(&p);
            spec.validate(&p).input()?;
            let ladder = ladder.unwrap_or_else(|| DEFAULT_LADDER.to_vec());
            let opts = GapOptions { ladder, grid: spec, k, starts, seed, mode };
            let report = gap_bound(&p, &opts).map_err(|e| match e {
                relaxgap::gap::GapError::BadLadder(_) => Failure::Input(e.into()),
                other => Failure::Solver(other.into()),
            })?;
            if let Some(path) = csv {
                write_file(&path, &report.to_csv())?;
            }
            emit(&report, out.as_deref())
        }
        Command::Residual { problem, control, grid, dt, out } => {
            let p = load(&problem)?;
            let spec = grid.spec(&p);
            spec.validate(&p).input()?;
            let dt = positive_dt(dt, &p)?;
            let (residual, cost) = match read_json::<ControlFile>(&control)? {
                ControlFile::Classical(c) => {
                    let c = ClassicalControl::new(c.time_grid, c.values).input()?;
                    c.validate_for(&p).input()?;
                    let tr = integrate_classical(&p, &c, dt).solver()?;
                    (liouville_residual(&p, &tr, ControlRef::Classical(&c), &spec).solver()?, total_cost(&p, &tr).solver()?)
                }
                ControlFile::Young(y) => {
                    let y = YoungMeasureControl::new(y.time_grid, y.atoms, y.weights).input()?;
                    y.validate_for(&p).input()?;
                    let tr = integrate_young(&p, &y, dt).solver()?;
                    (liouville_residual(&p, &tr, ControlRef::Young(&y), &spec).solver()?, total_cost(&p, &tr).solver()?)
                }
            };
            emit(&ResidualReport { problem: p.name.clone(), grid: spec, dt, residual, cost }, out.as_deref())
        }
        Command::ExportLp { problem, out, grid, eps, mode } => {
            let p = load(&problem)?;
            let spec = grid.spec(&p);
            spec.validate(&p).input()?;
            let lp = assemble_lp(&p, &spec, mode, eps).input()?;
            write_file(&out, &lp.to_triplet_text())
        }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("RELAXGAP_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n >= 1)
        .ok_or_else(|| Failure::Input(anyhow!("RELAXGAP_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().solver()
}

/// The error chain joined by `: `, skipping causes already quoted by the
/// message above them.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match configure_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
        Err(Failure::Solver(e)) => {
            eprintln!("solver failure: {}", describe(&e));
            ExitCode::from(3)
        }
    }
}
