use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use safe_core::netsim::{audit, Trace};
use safe_core::scenario::{bench_merge, run_scenario, Scenario};

const EXIT_EXPECTATION: u8 = 1;
const EXIT_PARSE: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

#[derive(Parser)]
#[command(name = "safe", version, about = "Run SAFE scenarios, audit traces, benchmark label merges")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and check its expectations.
    Run {
        file: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Include the full frame trace in the output.
        #[arg(long)]
        trace: bool,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Time merging L labels of P readers each.
    BenchMerge {
        labels: usize,
        principals: usize,
        #[arg(long, default_value_t = 10_000)]
        rounds: usize,
    },
    /// Re-check an exported trace against the flow rule.
    Audit { tracefile: PathBuf },
}

fn read(path: &Path) -> Result<String, ExitCode> {
    std::fs::read_to_string(path).map_err(|e| {
        eprintln!("error: cannot read {}: {e}", path.display());
        ExitCode::from(EXIT_INTERNAL)
    })
}

fn run(file: &Path, seed: u64, trace: bool, json: bool) -> Result<ExitCode, ExitCode> {
    let text = read(file)?;
    let scenario = Scenario::parse(&text).map_err(|e| {
        eprintln!("error: {}:{e}", file.display());
        ExitCode::from(EXIT_PARSE)
    })?;
    let name = file.file_stem().map_or_else(|| file.display().to_string(), |s| s.to_string_lossy().into_owned());
    let outcome = run_scenario(&scenario, &name, seed).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(EXIT_INTERNAL)
    })?;
    let report = &outcome.report;
    if json {
        let mut value = serde_json::to_value(report).map_err(|e| {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_INTERNAL)
        })?;
        if trace {
            let lines: Vec<String> = outcome.trace.export().lines().map(str::to_owned).collect();
            value["trace"] = lines.into();
        }
        println!("{}", serde_json::to_string_pretty(&value).expect("json values serialize"));
    } else {
        if trace {
            print!("{}", outcome.trace.export());
        }
        print!("{}", report.render());
    }
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(EXIT_EXPECTATION) })
}

fn audit_file(path: &Path) -> Result<ExitCode, ExitCode> {
    let text = read(path)?;
    let trace = Trace::parse(&text).map_err(|e| {
        eprintln!("error: {}: {e}", path.display());
        ExitCode::from(EXIT_PARSE)
    })?;
    let violations = audit(&trace);
    for v in &violations {
        println!("violation: {v}");
    }
    println!("{} frames, {} violations", trace.entries.len(), violations.len());
    Ok(if violations.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(EXIT_EXPECTATION) })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { file, seed, trace, json } => run(&file, seed, trace, json),
        Command::BenchMerge { labels, principals, rounds } => {
            if labels < 2 {
                eprintln!("error: need at least two labels");
                return ExitCode::from(EXIT_PARSE);
            }
            let r = bench_merge(labels, principals, rounds);
            println!(
                "merged {} labels of {} readers: {:.3} us per chain, {:.3} us per merge ({} rounds, {} readers left)",
                r.labels,
                r.principals,
                r.chain.as_secs_f64() * 1e6,
                r.per_merge.as_secs_f64() * 1e6,
                r.rounds,
                r.result_readers
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Audit { tracefile } => audit_file(&tracefile),
    };
    result.unwrap_or_else(|code| code)
}
