use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nogap::report::{self, Command, InputError, RunOptions, EXIT_INPUT};

#[derive(Parser)]
#[command(name = "nogap", version, about = "Second-order optimality and quadratic-growth diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Full pipeline: stationarity, qualifications, second-order analysis, growth oracle.
    Analyze(FileArgs),
    /// Constraint qualifications only.
    Cq(FileArgs),
    /// Sampled quadratic-growth estimate only.
    Qgc(FileArgs),
    /// Univariate piecewise function: subgradients, positive-definiteness conditions, growth.
    Pw1d(FileArgs),
    /// Run every entry of a golden-file corpus.
    Corpus {
        #[arg(default_value = "corpus")]
        dir: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
}

#[derive(Args)]
struct FileArgs {
    file: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20_000)]
    samples: usize,
    /// Single sampling radius.
    #[arg(long, conflicts_with = "radii")]
    radius: Option<f64>,
    /// Comma-separated radii, or `auto`.
    #[arg(long)]
    radii: Option<String>,
    #[arg(long, default_value_t = 1e-7)]
    tol: f64,
    /// Write the report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    /// Run the tilt-stability probe (analyze only).
    #[arg(long)]
    tilt: bool,
    /// Include wall-clock seconds per stage (makes reports non-reproducible).
    #[arg(long)]
    timings: bool,
    /// Reference point for pw1d.
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    at: f64,
}

fn parse_radii(a: &FileArgs) -> Result<Option<Vec<f64>>, InputError> {
    if let Some(r) = a.radius {
        return Ok(Some(vec![r]));
    }
    match a.radii.as_deref() {
        None | Some("auto") => Ok(None),
        Some(list) => {
            let radii: Result<Vec<f64>, _> = list.split(',').map(|t| t.trim().parse::<f64>()).collect();
            match radii {
                Ok(r) if !r.is_empty() && r.iter().all(|v| v.is_finite() && *v > 0.0) => Ok(Some(r)),
                _ => Err(InputError(format!("invalid --radii `{list}`"))),
            }
        }
    }
}

fn thread_pool(threads: Option<usize>) -> rayon::ThreadPool {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n.max(1));
    }
    b.build().expect("thread pool")
}

fn emit(json: &str, target: Option<&Path>) -> Result<(), InputError> {
    match target {
        Some(p) => std::fs::write(p, json).map_err(|e| InputError(format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{json}");
            Ok(())
        }
    }
}

fn run_file_command(cmd: Option<Command>, a: &FileArgs) -> Result<i32, InputError> {
    let opts = RunOptions {
        seed: a.seed,
        samples: a.samples,
        radii: parse_radii(a)?,
        tol: a.tol,
        tilt: a.tilt,
        timings: a.timings,
        at: a.at,
    };
    let (json, code) = thread_pool(a.threads).install(|| -> Result<_, InputError> {
        Ok(match cmd {
            Some(c) => {
                let out = report::run_file(c, &a.file, &opts)?;
                (out.to_json(), out.exit_code)
            }
            None => {
                let out = report::run_pw1d_file(&a.file, &opts)?;
                (out.to_json(), out.exit_code)
            }
        })
    })?;
    emit(&json, a.report.as_deref())?;
    Ok(code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Cmd::Analyze(a) => run_file_command(Some(Command::Analyze), a),
        Cmd::Cq(a) => run_file_command(Some(Command::Cq), a),
        Cmd::Qgc(a) => run_file_command(Some(Command::Qgc), a),
        Cmd::Pw1d(a) => run_file_command(None, a),
        Cmd::Corpus { dir, threads } => thread_pool(*threads).install(|| {
            let results = nogap::corpus::run_corpus(dir).map_err(|e| InputError(e.to_string()))?;
            print!("{}", nogap::corpus::table(&results));
            Ok(if results.iter().all(|r| r.passed()) { 0 } else { report::EXIT_NUMERIC })
        }),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_INPUT as u8)
        }
    }
}
