use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sage_bench::run::{addb_path, RESULTS_FILE};
use sage_bench::{render, report_from_tsv, BenchConfig, Workload};

#[derive(Parser)]
#[command(
    name = "sage-bench",
    about = "Workloads and reports for the sage object store"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a default config file.
    Init {
        #[arg(long, default_value = "sage.toml")]
        config: PathBuf,
    },
    /// Run workloads on a fresh simulated cluster.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// stream, dht, checkpoint, offload or all; repeatable.
        #[arg(long, default_value = "all")]
        workload: Vec<String>,
        #[arg(long, default_value = "sage-out")]
        out: PathBuf,
    },
    /// Rebuild the report of a finished run from its telemetry export.
    Report {
        /// Run directory holding addb.tsv, or the export itself.
        #[arg(long, default_value = "sage-out")]
        out: PathBuf,
    },
}

fn workloads(names: &[String]) -> Result<Vec<Workload>, sage_bench::BenchError> {
    let mut out = Vec::new();
    for name in names {
        if name == "all" {
            out.extend(Workload::ALL);
        } else {
            out.push(name.parse()?);
        }
    }
    out.dedup();
    Ok(out)
}

/// Prints to stdout; a closed pipe is not an error.
fn say(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn main() -> ExitCode {
    match real_main() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("verification failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> Result<bool, sage_bench::BenchError> {
    match Cli::parse().command {
        Command::Init { config } => {
            std::fs::write(&config, BenchConfig::default().to_toml()?)?;
            say(&format!("wrote {}\n", config.display()));
            Ok(true)
        }
        Command::Run {
            config,
            seed,
            workload,
            out,
        } => {
            let mut cfg = match config {
                Some(path) => BenchConfig::load(&path)?,
                None => BenchConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.cluster.seed = seed;
            }
            let results = sage_bench::run(&cfg, &workloads(&workload)?, &out)?;
            say(&format!(
                "{}\naddb: {}\nresults: {}\n",
                render(&results.report),
                addb_path(&out).display(),
                out.join(RESULTS_FILE).display()
            ));
            Ok(results.verified)
        }
        Command::Report { out } => {
            let path = if out.is_dir() { addb_path(&out) } else { out };
            let report = report_from_tsv(&std::fs::read_to_string(&path)?)?;
            let json = path.with_file_name("report.json");
            std::fs::write(&json, serde_json::to_string_pretty(&report)?)?;
            say(&format!(
                "{}\nreport: {}\n",
                render(&report),
                json.display()
            ));
            Ok(report.verified)
        }
    }
}
