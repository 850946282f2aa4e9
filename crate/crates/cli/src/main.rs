use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use tolfl::data::SyntheticSpec;
use tolfl::experiment::{
    execute, report, suite, DatasetSource, ExperimentConfig, Preset, SuiteOptions, OUT_DIR_ENV,
};
use tolfl::simnet::ServerDownPolicy;

#[derive(Parser)]
#[command(
    name = "tolfl",
    version,
    about = "Tolerant federated learning simulator"
)]
struct Cli {
    /// Directory for traces, summaries and provenance records.
    #[arg(long, global = true, env = OUT_DIR_ENV, default_value = "tolfl-out")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run { config: PathBuf },
    /// Run all four protocols under a scenario preset
    /// (clean, client-fail, server-fail).
    Suite {
        preset: Preset,
        #[arg(long = "N", default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        reps: usize,
        #[arg(long, default_value_t = 1e-3)]
        alpha: f64,
        /// Override the synthetic dataset size.
        #[arg(long)]
        samples_per_class: Option<usize>,
        /// Override the device the preset takes down.
        #[arg(long)]
        fail_device: Option<usize>,
        /// Stop the remaining devices instead of training locally once the
        /// FL server is down.
        #[arg(long)]
        halt_on_server_failure: bool,
    },
    /// Summarize every trace in a directory.
    Report { trace_dir: PathBuf },
}

fn run(cli: Cli) -> Result<()> {
    let out_dir: &Path = &cli.out_dir;
    match cli.command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::from_file(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            let (result, artifacts) = execute(&cfg, out_dir)?;
            println!("{}", result.summary_line());
            eprintln!(
                "wrote {} trace(s), {} and {}",
                artifacts.traces.len(),
                artifacts.summary.display(),
                artifacts.provenance.display()
            );
        }
        Command::Suite {
            preset,
            n,
            k,
            epochs,
            seed,
            reps,
            alpha,
            samples_per_class,
            fail_device,
            halt_on_server_failure,
        } => {
            let mut spec = SyntheticSpec::default();
            if let Some(s) = samples_per_class {
                spec.samples_per_class = s;
            }
            let opts = SuiteOptions {
                n_devices: n,
                k,
                epochs,
                seed,
                repetitions: reps,
                alpha,
                dataset: DatasetSource::Synthetic(spec),
                fail_device,
                post_failure: if halt_on_server_failure {
                    ServerDownPolicy::Halt
                } else {
                    ServerDownPolicy::LocalTraining
                },
            };
            let result = suite(preset, &opts, Some(out_dir))?;
            print!("{}", result.summary_text());
            if let Some(p) = &result.summary_path {
                eprintln!("wrote {}", p.display());
            }
        }
        Command::Report { trace_dir } => print!("{}", report(&trace_dir)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
