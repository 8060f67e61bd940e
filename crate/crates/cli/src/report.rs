//! Post-run summary: reads the CSV telemetry of a finished run and
//! condenses it into headline metrics.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

/// Headline metrics of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    /// Largest per-agent consensus error at the final step.
    pub final_max_error_norm: f64,
    /// First time (seconds) at which every agent's error and the consensus
    /// spread fell below 1% of their initial values; none if never.
    pub time_to_threshold_s: Option<f64>,
    /// Fraction of sent frames that were dropped.
    pub dropout_rate: f64,
    /// Mean absolute gap between predicted and realized delays (ms),
    /// over links with a standing prediction and excluding dropouts.
    pub mean_abs_prediction_error_ms: f64,
    /// Worst closed-loop spectral radius from the certificate report.
    pub max_spectral_radius: Option<f64>,
}

/// Threshold fraction used for the time-to-consensus metric.
pub const THRESHOLD_FRACTION: f64 = 0.01;

pub fn summarize(dir: &Path, bin_ms: f64) -> Result<Summary> {
    let errors = read_csv(&dir.join("errors.csv"))?;
    let delta_max = read_csv(&dir.join("delta_max.csv"))?;
    let delays = read_csv(&dir.join("delays.csv"))?;
    let channel = read_csv(&dir.join("channel.csv"))?;
    if errors.rows.is_empty() || delta_max.rows.is_empty() {
        bail!("{}: no telemetry rows", dir.display());
    }

    let step_col = errors.column("step")?;
    let agent_col = errors.column("agent")?;
    let err_col = errors.column("error_norm")?;
    let n_agents = errors
        .rows
        .iter()
        .map(|r| r[agent_col] as usize)
        .max()
        .unwrap()
        + 1;
    let steps = errors
        .rows
        .iter()
        .map(|r| r[step_col] as usize)
        .max()
        .unwrap()
        + 1;
    let mut err = vec![vec![0.0f64; n_agents]; steps];
    for row in &errors.rows {
        err[row[step_col] as usize][row[agent_col] as usize] = row[err_col];
    }

    let d_col = delta_max.column("delta_max")?;
    let d_step = delta_max.column("step")?;
    let mut dmax = vec![0.0f64; steps];
    for row in &delta_max.rows {
        dmax[row[d_step] as usize] = row[d_col];
    }

    let final_max_error_norm = err[steps - 1].iter().cloned().fold(0.0, f64::max);
    // a quantity that starts at (numerically) zero is already converged
    // and imposes no decay requirement
    let threshold = |initial: f64| -> Option<f64> {
        (initial > 1e-9).then_some(THRESHOLD_FRACTION * initial)
    };
    let error_thresholds: Vec<Option<f64>> = err[0].iter().map(|&e| threshold(e)).collect();
    let dmax_threshold = threshold(dmax[0]);
    let hit = (0..steps).find(|&k| {
        let all_ok = (0..n_agents).all(|i| match error_thresholds[i] {
            Some(t) => err[k][i] < t,
            None => true,
        });
        all_ok
            && match dmax_threshold {
                Some(t) => dmax[k] < t,
                None => true,
            }
    });
    let time_to_threshold_s = hit.map(|k| k as f64 * bin_ms / 1000.0);

    // dropout rate from the final cumulative channel counters
    let c_step = channel.column("step")?;
    let c_sent = channel.column("sent")?;
    let c_dropped = channel.column("dropped")?;
    let last_step = channel
        .rows
        .iter()
        .map(|r| r[c_step] as usize)
        .max()
        .ok_or_else(|| anyhow!("channel.csv is empty"))?;
    let (mut sent, mut dropped) = (0.0, 0.0);
    for row in &channel.rows {
        if row[c_step] as usize == last_step {
            sent += row[c_sent];
            dropped += row[c_dropped];
        }
    }
    let dropout_rate = if sent > 0.0 { dropped / sent } else { 0.0 };

    // prediction error over rows with a prediction, excluding dropouts and
    // predicted dropouts (the mask value)
    let p_col = delays.column("predicted_ms")?;
    let r_col = delays.column("realized_ms")?;
    let drop_col = delays.column("dropped")?;
    let mut gap = 0.0;
    let mut count = 0usize;
    for row in &delays.rows {
        let predicted = row[p_col];
        let realized = row[r_col];
        if predicted.is_nan() || row[drop_col] != 0.0 {
            continue;
        }
        if predicted >= netcons_core::DEFAULT_MASK_MS {
            continue;
        }
        gap += (predicted - realized).abs();
        count += 1;
    }
    let mean_abs_prediction_error_ms = if count > 0 { gap / count as f64 } else { f64::NAN };

    let max_spectral_radius = read_gains(&dir.join("gains.txt"));

    Ok(Summary {
        final_max_error_norm,
        time_to_threshold_s,
        dropout_rate,
        mean_abs_prediction_error_ms,
        max_spectral_radius,
    })
}

/// Largest per-agent spectral radius recorded in the certificate report.
fn read_gains(path: &Path) -> Option<f64> {
    let text = fs::read_to_string(path).ok()?;
    let mut worst: Option<f64> = None;
    for line in text.lines() {
        for field in line.split_whitespace() {
            if let Some(v) = field.strip_prefix("spectral_radius=") {
                if let Ok(v) = v.parse::<f64>() {
                    worst = Some(worst.map_or(v, |w: f64| w.max(v)));
                }
            }
        }
    }
    worst
}

/// Write `summary.csv` into the run directory and return its text.
pub fn write_summary(dir: &Path, summary: &Summary) -> Result<String> {
    let mut text = String::from("metric,value\n");
    text.push_str(&format!(
        "final_max_error_norm,{}\n",
        summary.final_max_error_norm
    ));
    text.push_str(&format!(
        "time_to_threshold_s,{}\n",
        summary
            .time_to_threshold_s
            .map(|v| v.to_string())
            .unwrap_or_else(|| "unreached".into())
    ));
    text.push_str(&format!("dropout_rate,{}\n", summary.dropout_rate));
    text.push_str(&format!(
        "mean_abs_prediction_error_ms,{}\n",
        summary.mean_abs_prediction_error_ms
    ));
    if let Some(rho) = summary.max_spectral_radius {
        text.push_str(&format!("max_spectral_radius,{rho}\n"));
    }
    fs::write(dir.join("summary.csv"), &text)
        .with_context(|| format!("writing summary into {}", dir.display()))?;
    Ok(text)
}

struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl Csv {
    fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| anyhow!("missing column {name:?}"))
    }
}

fn read_csv(path: &Path) -> Result<Csv> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| anyhow!("{}: empty file", path.display()))?
        .split(',')
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|cell| {
                if cell.is_empty() {
                    f64::NAN
                } else {
                    cell.parse().unwrap_or(f64::NAN)
                }
            })
            .collect();
        rows.push(row);
    }
    Ok(Csv { header, rows })
}
