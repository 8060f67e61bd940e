//! Command-line front end: train delay models, sample synthetic traces,
//! run consensus simulations, and summarize results.
//!
//! Exit codes: 0 success, 1 usage or input error, 2 numeric or
//! certification failure, 3 training finished without converging (the
//! model is still written).

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};

use netcons::config::SimConfig;
use netcons::formats::{read_model, read_trace, write_model, write_trace};
use netcons::output::write_outputs;
use netcons::report::{summarize, write_summary};
use netcons_core::runtime::{run_simulation, SimError};
use netcons_core::schmm::{sample_trace, train_model, TrainOptions};
use netcons_core::{DEFAULT_BIN_MS, DEFAULT_MASK_MS};

#[derive(Parser)]
#[command(
    name = "netcons",
    about = "Multi-agent consensus under network delays and dropouts",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a delay model to a recorded trace.
    Train {
        /// Trace file: one delay (ms) per line, dropouts as the mask value.
        #[arg(long)]
        trace: PathBuf,
        /// Number of hidden states.
        #[arg(long, default_value_t = 3)]
        states: usize,
        /// Number of codebook components (Gaussians plus the dropout mass).
        #[arg(long, default_value_t = 4)]
        mixtures: usize,
        #[arg(long, default_value_t = 50)]
        max_iters: usize,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        /// Dropout mask (ms).
        #[arg(long, default_value_t = DEFAULT_MASK_MS)]
        mask: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Emission bin width (ms) used for likelihood evaluation.
        #[arg(long, default_value_t = DEFAULT_BIN_MS)]
        bin_ms: f64,
        /// Candidate initializations scored before the full fit; 1 keeps
        /// the plain k-means + uniform initialization only.
        #[arg(long, default_value_t = 24)]
        restarts: usize,
        /// Output model file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample a synthetic delay trace from a model.
    Sample {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        length: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Quantize delays to sampling-bin midpoints of this width (ms).
        #[arg(long)]
        quantize_bin: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a consensus simulation described by a config file.
    Simulate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Summarize a finished run directory.
    Report {
        /// Run directory written by `simulate`.
        #[arg(long = "in")]
        dir: PathBuf,
        /// Sampling period (ms) used to convert steps to seconds.
        #[arg(long, default_value_t = DEFAULT_BIN_MS)]
        bin_ms: f64,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own message (including --help/--version)
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

/// Numeric and certification failures exit with 2, everything else with 1.
fn exit_code_for(e: &anyhow::Error) -> u8 {
    if let Some(sim) = e.downcast_ref::<SimError>() {
        return match sim {
            SimError::Gain { .. } | SimError::Diverged { .. } => 2,
            _ => 1,
        };
    }
    1
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train {
            trace,
            states,
            mixtures,
            max_iters,
            tol,
            mask,
            seed,
            bin_ms,
            restarts,
            out,
        } => {
            let trace = read_trace(&trace, mask)?;
            let opts = TrainOptions {
                n_states: states,
                n_mixtures: mixtures,
                max_iters,
                tol,
                seed,
                bin_ms,
                restarts,
                ..TrainOptions::default()
            };
            let fit = train_model(&trace, &opts)
                .map_err(|e| anyhow!("training failed: {e}"))?;
            for (i, ll) in fit.log_likelihood.iter().enumerate() {
                println!("iteration {i}: log-likelihood {ll}");
            }
            write_model(&out, &fit.model)?;
            println!("model written to {}", out.display());
            if !fit.converged {
                eprintln!("warning: did not converge within {max_iters} iterations");
                return Ok(ExitCode::from(3));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Sample {
            model,
            length,
            seed,
            quantize_bin,
            out,
        } => {
            let model = read_model(&model)?;
            let trace =
                sample_trace(&model, length, seed).map_err(|e| anyhow!("sampling: {e}"))?;
            let trace = match quantize_bin {
                Some(bin) => trace.quantized(bin),
                None => trace,
            };
            write_trace(&out, &trace)?;
            println!(
                "wrote {} samples ({} dropouts) to {}",
                trace.len(),
                trace.dropout_count(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate { config } => {
            let cfg = SimConfig::load(&config)?;
            let base = config
                .parent()
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("."));
            let mut setup = cfg.build_setup(&base)?;
            // always snapshot the initial models; the final ones are
            // recorded automatically
            if !setup.snapshot_steps.contains(&0) {
                setup.snapshot_steps.push(0);
            }
            let result = run_simulation(&setup).context("simulation failed")?;
            let out_dir = if cfg.output_dir.is_absolute() {
                cfg.output_dir.clone()
            } else {
                base.join(&cfg.output_dir)
            };
            write_outputs(&out_dir, &result)?;
            println!(
                "simulated {} steps for {} agents; outputs in {}",
                result.steps,
                result.n_agents,
                out_dir.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { dir, bin_ms } => {
            let summary = summarize(&dir, bin_ms)?;
            let text = write_summary(&dir, &summary)?;
            print!("{text}");
            Ok(ExitCode::SUCCESS)
        }
    }
}
