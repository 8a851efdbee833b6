//! Batch front-end over the quadratura library: parse a problem file,
//! dispatch one analysis, print a summary, and write machine-readable
//! reports. Exit codes: 0 all checks passed, 1 negative result, 2 usage or
//! parse error.

mod commands;
mod output;
mod problem;

use clap::{Parser, Subcommand};
use commands::{cmd_check, cmd_equiv, cmd_prufer, cmd_reduce, cmd_solve_linear, CliError, Ctx};
use problem::ProblemFile;
use quadratura::sampling::DEFAULT_SEED;
use quadratura::ToleranceConfig;
use std::path::PathBuf;
use std::process::ExitCode;

/// Analyses of quadrature systems, integral families, and oscillator phase
/// flow, driven by sectioned problem files.
#[derive(Parser)]
#[command(name = "quadratura", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// Integration tolerance override.
    #[arg(long, global = true, value_name = "TOL")]
    tol_ode: Option<f64>,

    /// Constancy-decision tolerance override.
    #[arg(long, global = true, value_name = "TOL")]
    tol_constancy: Option<f64>,

    /// Working box for the constants, one `lo:hi` range per axis,
    /// comma-separated. Overrides the file's [box] section.
    #[arg(long = "box", global = true, value_name = "RANGES", allow_hyphen_values = true)]
    box_ranges: Option<String>,

    /// Sampling seed. Falls back to QUADRATURA_SEED, then to the built-in
    /// default; the effective seed is echoed in every report header.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output grid as `lo:hi:count`. Defaults to 101 points over the
    /// target's declared interval.
    #[arg(long, global = true, value_name = "RANGE", allow_hyphen_values = true)]
    grid: Option<String>,

    /// Directory for reports and CSV files.
    #[arg(long, global = true, default_value = ".", value_name = "DIR")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Structural checks for an integral family: independence,
    /// admissibility, the gradient identity, the effective-parameter probe.
    Check { file: PathBuf, target: String },
    /// Rewrite an integral family into its two-quadrature normal form.
    Reduce { file: PathBuf, target: String },
    /// Integrate a second-order oscillator in phase coordinates and audit
    /// whether its coefficient admits the travel-time first integral.
    Prufer { file: PathBuf, target: String },
    /// Evaluate the closed-form solution of a first-order linear problem.
    SolveLinear { file: PathBuf, target: String },
    /// Sampled equivalence of two integral families from the same file.
    Equiv {
        file: PathBuf,
        target_a: String,
        target_b: String,
    },
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn resolve_seed(flag: Option<u64>) -> Result<u64, CliError> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    match std::env::var("QUADRATURA_SEED") {
        Ok(text) => text
            .trim()
            .parse::<u64>()
            .map_err(|_| usage(format!("QUADRATURA_SEED is not a whole number: `{text}`"))),
        Err(std::env::VarError::NotPresent) => Ok(DEFAULT_SEED),
        Err(e) => Err(usage(format!("QUADRATURA_SEED: {e}"))),
    }
}

fn parse_range(part: &str, flag: &str) -> Result<(f64, f64), CliError> {
    let Some((lo, hi)) = part.split_once(':') else {
        return Err(usage(format!("{flag}: `{part}` is not of the form lo:hi")));
    };
    let lo: f64 = lo
        .parse()
        .map_err(|_| usage(format!("{flag}: `{lo}` is not a number")))?;
    let hi: f64 = hi
        .parse()
        .map_err(|_| usage(format!("{flag}: `{hi}` is not a number")))?;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(usage(format!("{flag}: range {lo}:{hi} is empty")));
    }
    Ok((lo, hi))
}

fn parse_box(text: &str) -> Result<Vec<(f64, f64)>, CliError> {
    text.split(',').map(|part| parse_range(part, "--box")).collect()
}

fn parse_grid(text: &str) -> Result<(f64, f64, usize), CliError> {
    let parts: Vec<&str> = text.split(':').collect();
    let [lo, hi, count] = parts.as_slice() else {
        return Err(usage(format!("--grid: `{text}` is not of the form lo:hi:count")));
    };
    let (lo, hi) = parse_range(&format!("{lo}:{hi}"), "--grid")?;
    let count: usize = count
        .parse()
        .map_err(|_| usage(format!("--grid: `{count}` is not a point count")))?;
    if count < 2 {
        return Err(usage("--grid: need at least two points"));
    }
    Ok((lo, hi, count))
}

fn run(cli: Cli) -> Result<bool, CliError> {
    let (file, action) = match cli.command {
        Cmd::Check { file, target } => (file, Action::Check(target)),
        Cmd::Reduce { file, target } => (file, Action::Reduce(target)),
        Cmd::Prufer { file, target } => (file, Action::Prufer(target)),
        Cmd::SolveLinear { file, target } => (file, Action::SolveLinear(target)),
        Cmd::Equiv {
            file,
            target_a,
            target_b,
        } => (file, Action::Equiv(target_a, target_b)),
    };

    let text = std::fs::read_to_string(&file)
        .map_err(|e| usage(format!("cannot read {}: {e}", file.display())))?;
    let problem = ProblemFile::parse(&text)
        .map_err(|e| usage(format!("{}: {e}", file.display())))?;

    let mut tol = ToleranceConfig::default();
    if let Some(overrides) = &problem.tolerances {
        tol = overrides.apply(tol);
    }
    if let Some(v) = cli.tol_ode {
        tol.ode_tol = v;
    }
    if let Some(v) = cli.tol_constancy {
        tol.constancy_tol = v;
    }
    tol.validate().map_err(|e| usage(e.to_string()))?;

    let ctx = Ctx {
        problem,
        tol,
        seed: resolve_seed(cli.seed)?,
        out_dir: cli.out,
        box_override: cli.box_ranges.as_deref().map(parse_box).transpose()?,
        grid_override: cli.grid.as_deref().map(parse_grid).transpose()?,
    };

    match &action {
        Action::Check(target) => cmd_check(&ctx, target),
        Action::Reduce(target) => cmd_reduce(&ctx, target),
        Action::Prufer(target) => cmd_prufer(&ctx, target),
        Action::SolveLinear(target) => cmd_solve_linear(&ctx, target),
        Action::Equiv(a, b) => cmd_equiv(&ctx, a, b),
    }
}

enum Action {
    Check(String),
    Reduce(String),
    Prufer(String),
    SolveLinear(String),
    Equiv(String, String),
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(CliError::Analysis(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
