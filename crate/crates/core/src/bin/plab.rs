use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use plab::harness::{self, compare, format_table, write_summary, ExperimentConfig, RunRecord};
use plab::metrics::aat;
use plab::{verify, Error, Result};

#[derive(Parser)]
#[command(name = "plab", version, about = "ARROW optimizer and plasticity diagnostics lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration (all its seeds, or just --seed).
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Expand the config's ARROW grid and run every point.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in oracle suites.
    Verify,
    /// Recompute AAT from a CSV of per-task accuracies.
    Aat {
        #[arg(long)]
        csv: PathBuf,
        /// Column to average; defaults to `accuracy`, or every column.
        #[arg(long)]
        column: Option<String>,
    },
    /// Tabulate saved runs by mean AAT.
    Compare {
        #[arg(long = "in", num_args = 1.., required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long, default_value = "summary.csv")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Run { config, seed, out } => {
            let mut c = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                c.seeds = vec![s];
            }
            let r = harness::run(&c, Some(&out))?;
            print_record(&r);
        }
        Command::Grid { config, out } => {
            let base = ExperimentConfig::load(&config)?;
            let mut records = Vec::new();
            for point in base.grid_points() {
                let r = harness::run(&point, Some(&out.join(&point.name)))?;
                print_record(&r);
                records.push(r);
            }
            let rows = compare(&records)?;
            write_summary(&rows, &out.join("summary.csv"))?;
            print!("{}", format_table(&rows));
        }
        Command::Verify => {
            let checks = verify::all()?;
            for c in &checks {
                println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if checks.iter().any(|c| !c.passed) {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Aat { csv, column } => {
            for (name, value) in aat_from_csv(&csv, column.as_deref())? {
                println!("{name}\t{value:.4}");
            }
        }
        Command::Compare { dirs, out } => {
            let records = dirs
                .iter()
                .map(|d| RunRecord::load(&d.join("record.json")))
                .collect::<Result<Vec<_>>>()?;
            let rows = compare(&records)?;
            write_summary(&rows, &out)?;
            print!("{}", format_table(&rows));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn print_record(r: &RunRecord) {
    println!("{} [{}] AAT {:.4} ± {:.4}", r.name, r.method, r.mean_aat, r.std_aat);
    for s in &r.seeds {
        match &s.divergence {
            None => println!("  seed {}: AAT {:.4}", s.seed, s.report.aat),
            Some(d) => println!("  seed {}: diverged in task {} ({})", s.seed, d.task, d.reason),
        }
    }
}

/// AAT per selected column. A `task` column is ignored when averaging all.
fn aat_from_csv(path: &Path, column: Option<&str>) -> Result<Vec<(String, f64)>> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let rows: Vec<csv::StringRecord> = reader.records().collect::<std::result::Result<_, _>>()?;
    let selected: Vec<usize> = match column {
        Some(c) => vec![headers
            .iter()
            .position(|h| h == c)
            .ok_or_else(|| Error::Lookup(format!("column {c:?}")))?],
        None => match headers.iter().position(|h| h == "accuracy") {
            Some(i) => vec![i],
            None => (0..headers.len()).filter(|&i| headers[i] != "task").collect(),
        },
    };
    selected
        .into_iter()
        .map(|i| {
            let values = rows
                .iter()
                .map(|r| {
                    let cell = r.get(i).unwrap_or("").trim();
                    cell.parse::<f64>()
                        .map_err(|_| Error::InvalidInput(format!("{}: not a number: {cell:?}", headers[i])))
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok((headers[i].clone(), aat(&values)?))
        })
        .collect()
}
