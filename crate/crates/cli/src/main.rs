use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use orbsde::harness::config::{PreparedRun, ProblemConfig};
use orbsde::harness::convergence::{run_convergence, Reference};
use orbsde::harness::experiments::perturbation_study;
use orbsde::harness::export::{self, SolutionSummary};
use orbsde::scheme::{ProblemInputs, Retention};
use orbsde::switching::{evaluate_switched, extract_optimal_strategy, snell_check, write_strategy_csv, SnellSettings};
use orbsde::{CondExpBackend, Error};

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(name = "orbsde", version, about = "Reflected BSDE solver for optimal switching problems")]
struct Cli {
    /// Overrides the scenario seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Checks costs, coefficients and weight moments.
    Validate {
        config: PathBuf,
        /// Number of scenario states sampled for the model checks.
        #[arg(long, default_value_t = 256)]
        samples: usize,
    },
    /// Runs the backward scheme and prints a JSON summary.
    Solve {
        config: PathBuf,
        /// Writes the JSON summary here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Writes per-step aggregates as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Compares the scheme against every switching strategy on a lattice.
    Oracle {
        config: PathBuf,
        /// Start `i,j` (time index, one-based mode); all modes at time 0 by default.
        #[arg(long, value_parser = parse_start)]
        start: Option<(usize, usize)>,
        /// Random strategies drawn when enumeration is too large.
        #[arg(long, default_value_t = 1000)]
        sample: usize,
    },
    /// Extracts the optimal strategy from `(i, j)` and writes it as CSV.
    Strategy {
        config: PathBuf,
        /// Start `i,j` (time index, one-based mode).
        #[arg(long, value_parser = parse_start)]
        start: (usize, usize),
        #[arg(long, default_value = "strategy.csv")]
        out: PathBuf,
        /// Allows a switch at the start date.
        #[arg(long)]
        allow_initial_switch: bool,
    },
    /// Convergence study in the number of time steps.
    Converge {
        config: PathBuf,
        /// Strictly increasing grid sizes.
        #[arg(long, value_delimiter = ',', required = true)]
        n: Vec<usize>,
        #[arg(long, default_value_t = 0.5)]
        gamma: f64,
        #[arg(long, value_enum, default_value_t = ReferenceArg::Finest)]
        reference: ReferenceArg,
        /// Writes the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Response of `Y_0` to constant generator shifts.
    Perturb {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.02,0.04")]
        zeta: Vec<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ReferenceArg {
    Finest,
    /// Uses `reference_y0` from the configuration.
    Closed,
}

fn parse_start(s: &str) -> Result<(usize, usize), String> {
    let (i, j) = s.split_once(',').ok_or("expected i,j")?;
    let i = i.trim().parse::<usize>().map_err(|e| format!("time index: {e}"))?;
    let j = j.trim().parse::<usize>().map_err(|e| format!("mode: {e}"))?;
    if j == 0 {
        return Err("modes are numbered from 1".into());
    }
    Ok((i, j))
}

enum Failure {
    Validation(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type Outcome = Result<(), Failure>;

fn load(path: &Path) -> Result<ProblemConfig, Error> {
    ProblemConfig::from_path(path)
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), Error> {
    match out {
        Some(p) => std::fs::write(p, format!("{text}\n")).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        }),
        None => {
            let mut stdout = std::io::stdout().lock();
            match writeln!(stdout, "{text}") {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io {
                    path: PathBuf::from("<stdout>"),
                    source: e,
                }),
                _ => Ok(()),
            }
        }
    }
}

fn backend_label(run: &PreparedRun) -> String {
    match run.backend {
        orbsde::BackendKind::ExactLattice => "exact_lattice".into(),
        orbsde::BackendKind::LeastSquares { basis_degree, .. } => format!("least_squares(degree {basis_degree})"),
    }
}

fn validate(config: &Path, seed: Option<u64>, samples: usize) -> Outcome {
    let run = load(config)?.prepare(seed)?;
    let report = run.validate(samples);
    emit(report.to_string().trim_end(), None)?;
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Validation(format!("{} violations", report.violations.len())))
    }
}

fn solve(config: &Path, seed: Option<u64>, out: Option<&Path>, csv: Option<&Path>) -> Outcome {
    let cfg = load(config)?;
    let run = cfg.prepare(seed)?;
    let solution = run.solve(Retention::Summary)?;
    info!("solved {} steps, Y_0 = {:?}", run.grid.n(), solution.y0());
    let summary = SolutionSummary::new(&solution, cfg.name.clone(), &backend_label(&run));
    emit(&export::to_json_string(&summary)?, out)?;
    if let Some(path) = csv {
        export::write_solution_csv(&solution, path)?;
    }
    Ok(())
}

fn oracle(config: &Path, seed: Option<u64>, start: Option<(usize, usize)>, sample: usize) -> Outcome {
    let run = load(config)?.prepare(seed)?;
    if !run.scenario.is_lattice() {
        return Err(Error::InvalidArgument("the oracle needs the lattice backend".into()).into());
    }
    let backend = CondExpBackend::bind(run.backend, &run.scenario)?;
    let solution = run.solve(Retention::Full)?;
    let inputs = ProblemInputs(&run.problem);
    let d = run.problem.modes;
    let starts: Vec<(usize, usize)> = match start {
        Some((i, j)) => vec![(i, j - 1)],
        None => (0..d).map(|j| (0, j)).collect(),
    };
    let mut settings = SnellSettings::new(d);
    settings.sample = sample;
    settings.seed = seed.unwrap_or(0);
    let mut all_passed = true;
    let mut reports = Vec::new();
    for (i, j) in starts {
        let r = snell_check(&inputs, &solution, &run.scenario, &run.weights, &backend, i, j, &settings)?;
        all_passed &= r.passed;
        reports.push(r);
    }
    emit(&export::to_json_string(&reports)?, None)?;
    if all_passed {
        Ok(())
    } else {
        Err(Failure::Validation("Snell envelope checks failed".into()))
    }
}

fn strategy(config: &Path, seed: Option<u64>, start: (usize, usize), out: &Path, allow_initial: bool) -> Outcome {
    let run = load(config)?.prepare(seed)?;
    let (i, j) = (start.0, start.1 - 1);
    if j >= run.problem.modes {
        return Err(Error::InvalidArgument(format!("mode {} out of range 1..={}", start.1, run.problem.modes)).into());
    }
    let backend = CondExpBackend::bind(run.backend, &run.scenario)?;
    let solution = run.solve(Retention::Full)?;
    let inputs = ProblemInputs(&run.problem);
    let strat = extract_optimal_strategy(&inputs, &solution, &run.scenario, i, j, allow_initial)?;
    write_strategy_csv(&strat, out)?;
    let value = evaluate_switched(&inputs, Some(&solution), &run.scenario, &run.weights, &backend, &strat)?;
    let values = value.values();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let scheme: f64 =
        (0..run.scenario.count(i)).map(|p| solution.ytilde(i, p)[j]).sum::<f64>() / run.scenario.count(i) as f64;
    emit(
        &export::to_json_string(&serde_json::json!({
            "time_index": i,
            "mode": start.1,
            "strategy_value": mean,
            "scheme_value": scheme,
            "output": out.display().to_string(),
        }))?,
        None,
    )?;
    Ok(())
}

fn converge(
    config: &Path,
    seed: Option<u64>,
    n: &[usize],
    gamma: f64,
    reference: ReferenceArg,
    out: Option<&Path>,
) -> Outcome {
    let cfg = load(config)?;
    let reference = match reference {
        ReferenceArg::Finest => Reference::FinestGrid,
        ReferenceArg::Closed => Reference::ClosedForm(
            cfg.reference_y0
                .clone()
                .ok_or_else(|| Error::Config("--reference closed needs reference_y0 in the configuration".into()))?,
        ),
    };
    let table = run_convergence(&cfg, n, gamma, &reference, seed)?;
    match out {
        Some(p) => table.write_csv(p)?,
        None => {
            let (header, rows) = table.csv();
            export::write_csv_to(std::io::stdout().lock(), &header, &rows)?;
        }
    }
    match table.slope {
        Some(s) => eprintln!("fitted slope {s}"),
        None => eprintln!("fitted slope NA"),
    }
    if let Some(r) = table.rows.iter().find(|r| r.failure.is_some()) {
        return Err(Error::NumericalFailure(format!("row n = {} failed: {}", r.n, r.failure.as_deref().unwrap_or(""))).into());
    }
    Ok(())
}

fn perturb(config: &Path, seed: Option<u64>, zeta: &[f64]) -> Outcome {
    let run = load(config)?.prepare(seed)?;
    let study = perturbation_study(&run, zeta)?;
    emit(&export::to_json_string(&study)?, None)?;
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    let seed = cli.seed;
    match cli.command {
        Command::Validate { config, samples } => validate(&config, seed, samples),
        Command::Solve { config, out, csv } => solve(&config, seed, out.as_deref(), csv.as_deref()),
        Command::Oracle { config, start, sample } => oracle(&config, seed, start, sample),
        Command::Strategy {
            config,
            start,
            out,
            allow_initial_switch,
        } => strategy(&config, seed, start, &out, allow_initial_switch),
        Command::Converge {
            config,
            n,
            gamma,
            reference,
            out,
        } => converge(&config, seed, &n, gamma, reference, out.as_deref()),
        Command::Perturb { config, zeta } => perturb(&config, seed, &zeta),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("validation failed: {msg}");
            ExitCode::from(EXIT_VALIDATION)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
