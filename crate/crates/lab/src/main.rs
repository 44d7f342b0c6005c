use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand, ValueEnum};
use sril_lab::inspect::{inspect, What};
use sril_lab::report::{build, find_runs, load_metrics};
use sril_lab::spec::ReportFormat;
use sril_lab::{run_spec, Existing, ExperimentSpec, RunOptions};

#[derive(Parser)]
#[command(
    name = "sril",
    version,
    about = "Class-incremental learning experiments with selective regularization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
    Json,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Table => ReportFormat::Table,
            Format::Csv => ReportFormat::Csv,
            Format::Json => ReportFormat::Json,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Execute every run of an experiment spec.
    Run {
        spec: PathBuf,
        /// Run only this seed instead of the spec's seed list.
        #[arg(long)]
        seed: Option<u64>,
        /// Replace existing run directories.
        #[arg(long, conflicts_with = "resume")]
        overwrite: bool,
        /// Continue interrupted runs from their last completed task.
        #[arg(long)]
        resume: bool,
        /// Run jobs one at a time on a single thread.
        #[arg(long)]
        deterministic: bool,
        /// Output root; defaults to the spec's outputs.dir, then $SRIL_OUTPUT_ROOT, then ./runs.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Compare finished runs found under the given directories.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Write plot-ready CSV series for one run directory.
    Inspect {
        dir: PathBuf,
        /// confidence, mask, cka, shift, accuracy or embeddings.
        #[arg(long)]
        what: What,
    },
    /// Run the gradient, mask and brute-force oracle suite.
    Verify,
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run {
            spec,
            seed,
            overwrite,
            resume,
            deterministic,
            output,
            quiet,
        } => {
            let parsed = ExperimentSpec::load(&spec)?;
            let root = parsed.output_root(output.as_deref());
            if deterministic {
                rayon::ThreadPoolBuilder::new().num_threads(1).build_global()?;
            }
            let opts = RunOptions {
                existing: match (overwrite, resume) {
                    (true, _) => Existing::Overwrite,
                    (_, true) => Existing::Resume,
                    _ => Existing::Refuse,
                },
                deterministic,
                stop_after: None,
                quiet,
            };
            let set = run_spec(&parsed, seed, &root, &opts)?;
            let report = build(&set.metrics);
            let out_dir = root.join(&parsed.name);
            for &format in &parsed.outputs.formats {
                let text = report.render(format)?;
                std::fs::write(out_dir.join(format!("report.{}", format.extension())), &text)?;
                if format == ReportFormat::Table {
                    print!("{text}");
                }
            }
            eprintln!("{} runs written under {}", set.dirs.len(), out_dir.display());
            Ok(true)
        }
        Command::Report { dirs, format } => {
            let found = find_runs(&dirs)?;
            if found.is_empty() {
                bail!("no finished runs (metrics.json) under the given directories");
            }
            let report = build(&load_metrics(&found)?);
            print!("{}", report.render(format.into())?);
            Ok(report.warnings.is_empty())
        }
        Command::Inspect { dir, what } => {
            let path = inspect(&dir, what)?;
            println!("{}", path.display());
            Ok(true)
        }
        Command::Verify => {
            let report = sril_verify::run_all();
            print!("{report}");
            Ok(report.all_passed())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
