//! CSV and report persistence for simulation results.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a run
//! repeated with the same seed produces byte-identical files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};

use netcons_core::runtime::SimResult;

use crate::formats::write_model;

/// Write every telemetry file for a finished run into `dir`.
pub fn write_outputs(dir: &Path, result: &SimResult) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;

    let mut states = csv(dir, "states.csv")?;
    write!(states, "step,agent")?;
    let state_dim = result.states[0][0].len();
    for d in 0..state_dim {
        write!(states, ",x{d}")?;
    }
    writeln!(states)?;
    for (step, row) in result.states.iter().enumerate() {
        for (agent, x) in row.iter().enumerate() {
            write!(states, "{step},{agent}")?;
            for v in x.iter() {
                write!(states, ",{v}")?;
            }
            writeln!(states)?;
        }
    }

    let mut errors = csv(dir, "errors.csv")?;
    writeln!(errors, "step,agent,error_norm,lyapunov,alpha")?;
    for step in 0..result.steps {
        for agent in 0..result.n_agents {
            writeln!(
                errors,
                "{step},{agent},{},{},{}",
                result.error_norms[step][agent],
                result.lyapunov[step][agent],
                result.alphas[step][agent]
            )?;
        }
    }

    let mut dmax = csv(dir, "delta_max.csv")?;
    writeln!(dmax, "step,delta_max")?;
    for (step, v) in result.delta_max.iter().enumerate() {
        writeln!(dmax, "{step},{v}")?;
    }

    let mut delays = csv(dir, "delays.csv")?;
    writeln!(delays, "step,sender,receiver,predicted_ms,realized_ms,dropped")?;
    for r in &result.delays {
        let predicted = r
            .predicted_ms
            .map(|v| v.to_string())
            .unwrap_or_default();
        writeln!(
            delays,
            "{},{},{},{},{},{}",
            r.step,
            r.sender,
            r.receiver,
            predicted,
            r.realized_ms,
            u8::from(r.dropped)
        )?;
    }

    let mut channel = csv(dir, "channel.csv")?;
    writeln!(channel, "step,sender,receiver,sent,delivered,dropped")?;
    for r in &result.channel_series {
        writeln!(
            channel,
            "{},{},{},{},{},{}",
            r.step, r.sender, r.receiver, r.sent, r.delivered, r.dropped
        )?;
    }

    let models_dir = dir.join("models");
    fs::create_dir_all(&models_dir)?;
    for snap in &result.snapshots {
        let name = format!(
            "agent{}_neighbor{}_step{}.model",
            snap.agent, snap.neighbor, snap.step
        );
        write_model(&models_dir.join(name), &snap.model)?;
    }

    let mut gains = fs::File::create(dir.join("gains.txt"))?;
    for g in &result.gain_reports {
        writeln!(
            gains,
            "agent {}: spectral_radius={} decrease_margin={} riccati_iterations={} riccati_residual={} alpha0={}",
            g.agent,
            g.spectral_radius,
            g.decrease_margin,
            g.riccati_iterations,
            g.riccati_residual,
            g.alpha0
        )?;
    }

    Ok(())
}

fn csv(dir: &Path, name: &str) -> Result<BufWriter<fs::File>> {
    let path = dir.join(name);
    let file =
        fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}
