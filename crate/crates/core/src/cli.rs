//! The `chmc` command line.
//!
//! Exit codes: 0 success, 1 failed validation checks, 2 configuration error,
//! 3 run failure. Errors are reported on stderr as one JSON object
//! `{"error": <kind>, "message": <text>}`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::bench::{annotate_report, published_values, run_table1, second_moment_truth, Table1Settings};
use crate::config::{RunConfig, OUTPUT_DIR_ENV};
use crate::error::ChmcError;
use crate::output::{write_run, write_table1};
use crate::smc::run_chmc;
use crate::systems::{benchmark, BenchmarkName};
use crate::validate;

pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUN: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "chmc", version, about = "Counterdiabatic Hamiltonian Monte Carlo")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one experiment from a JSON config; writes trace.csv, particles_final.csv and report.json.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the benchmark table over a comma-separated seed list; writes table1.csv and table1.json.
    Table1 {
        #[arg(long, default_value = "0,1,2,3,4,5,6,7,8,9")]
        seeds: String,
        #[arg(long, default_value = "chmc-out")]
        output_dir: PathBuf,
        /// JSON file with table settings; the defaults follow the reference setup.
        #[arg(long)]
        settings: Option<PathBuf>,
    },
    /// Run the oracle and invariant checks and print a pass/fail table.
    Validate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print the report as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Print E[q^2] and Var[q^2] under the target at lambda.
    Oracle {
        #[arg(long)]
        system: String,
        #[arg(long)]
        lambda: f64,
    },
}

fn exit_code(e: &ChmcError) -> i32 {
    match e {
        ChmcError::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUN,
    }
}

fn report_error(e: &ChmcError) -> i32 {
    eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
    exit_code(e)
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>, ChmcError> {
    let seeds: Vec<u64> = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| ChmcError::Config(format!("invalid seed '{t}'"))))
        .collect::<Result<_, _>>()?;
    if seeds.is_empty() {
        return Err(ChmcError::Config("at least one seed is required".into()));
    }
    Ok(seeds)
}

fn cmd_run(config: &Path) -> Result<i32, ChmcError> {
    let cfg = RunConfig::load(config)?;
    let run = cfg.resolve()?;
    let mut out = run_chmc(&run.problem, &run.schedule, &run.settings)?;
    annotate_report(&mut out.report, &run.problem)?;
    for p in write_run(&run.output_dir, &out)? {
        println!("{}", p.display());
    }
    Ok(0)
}

fn cmd_table1(seeds: &str, output_dir: PathBuf, settings: Option<PathBuf>) -> Result<i32, ChmcError> {
    let seeds = parse_seeds(seeds)?;
    let settings: Table1Settings = match settings {
        Some(path) => {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| ChmcError::Config(format!("cannot read settings {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| ChmcError::Config(format!("invalid table settings: {e}")))?
        }
        None => Table1Settings::default(),
    };
    let dir = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()).map(PathBuf::from).unwrap_or(output_dir);
    let table = run_table1(&settings, &seeds)?;
    println!(
        "{:<12} {:<9} {:>10} {:>12} {:>12} {:>10} {:>10}",
        "system", "method", "truth", "unweighted", "weighted", "abs_err", "published"
    );
    for r in &table.summary {
        println!(
            "{:<12} {:<9} {:>10.4} {:>12.4} {:>12.4} {:>10.4} {:>10}",
            r.system,
            r.method,
            r.truth,
            r.median_unweighted,
            r.median_weighted,
            r.median_abs_error,
            r.published_estimate.map_or("-".into(), |v| format!("{v}"))
        );
    }
    for p in write_table1(&dir, &table)? {
        println!("{}", p.display());
    }
    Ok(0)
}

fn cmd_validate(seed: u64, as_json: bool) -> Result<i32, ChmcError> {
    let report = validate::run(&validate::Suite { seed, ..validate::Suite::default() });
    if as_json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.table());
    }
    Ok(if report.all_passed() { 0 } else { EXIT_CHECK_FAILED })
}

fn cmd_oracle(system: &str, lambda: f64) -> Result<i32, ChmcError> {
    let name: BenchmarkName = system.parse()?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(ChmcError::Config(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    let truth = second_moment_truth(&benchmark(name), lambda)?;
    let mut v = json!({
        "system": truth.system,
        "lambda": lambda,
        "f": truth.f,
        "value": truth.value,
        "variance_of_f": truth.variance_of_f,
        "method": truth.method,
    });
    if let (Some((published, _, _)), true) = (published_values(name), lambda == 1.0) {
        v["published_value"] = json!(published);
        v["discrepancy"] = json!(truth.value - published);
    }
    println!("{}", serde_json::to_string_pretty(&v)?);
    Ok(0)
}

/// Parses `args` (including the program name) and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let res = match cli.command {
        Command::Run { config } => cmd_run(&config),
        Command::Table1 { seeds, output_dir, settings } => cmd_table1(&seeds, output_dir, settings),
        Command::Validate { seed, json } => cmd_validate(seed, json),
        Command::Oracle { system, lambda } => cmd_oracle(&system, lambda),
    };
    res.unwrap_or_else(|e| report_error(&e))
}
