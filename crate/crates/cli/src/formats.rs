//! On-disk formats: delay traces, delay models, and communication graphs.
//!
//! All three are line-oriented UTF-8 text with `#` comments. Floating-point
//! values are written with Rust's shortest round-trip formatting, so
//! save/load cycles reproduce values bit-exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};

use netcons_core::schmm::{DelayTrace, SchmmModel};
use netcons_core::topology::Topology;
use netcons_core::DEFAULT_MASK_MS;

/// Read a delay trace: one delay per line in milliseconds, dropouts written
/// as the mask value.
pub fn read_trace(path: &Path, mask: f64) -> Result<DelayTrace> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading trace {}", path.display()))?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let value: f64 = line.parse().map_err(|_| {
            anyhow!(
                "{}:{}: not a delay value: {line:?}",
                path.display(),
                lineno + 1
            )
        })?;
        samples.push(value);
    }
    DelayTrace::new(samples, mask)
        .map_err(|e| anyhow!("{}: invalid trace: {e}", path.display()))
}

pub fn write_trace(path: &Path, trace: &DelayTrace) -> Result<()> {
    let mut out = String::new();
    for v in trace.samples() {
        out.push_str(&format!("{v}\n"));
    }
    fs::write(path, out).with_context(|| format!("writing trace {}", path.display()))
}

/// Write a delay model as a key/value text document.
pub fn write_model(path: &Path, model: &SchmmModel) -> Result<()> {
    let mut f = fs::File::create(path)
        .with_context(|| format!("creating model file {}", path.display()))?;
    writeln!(f, "# delay model")?;
    writeln!(f, "n_states {}", model.n_states())?;
    writeln!(f, "n_mixtures {}", model.n_mixtures())?;
    writeln!(f, "mask {}", model.mask())?;
    writeln!(f, "pi {}", join(model.pi()))?;
    for i in 0..model.n_states() {
        let row = &model.trans()[i * model.n_states()..(i + 1) * model.n_states()];
        writeln!(f, "trans {}", join(row))?;
    }
    for i in 0..model.n_states() {
        let row = &model.mix()[i * model.n_mixtures()..(i + 1) * model.n_mixtures()];
        writeln!(f, "mix {}", join(row))?;
    }
    writeln!(f, "mu {}", join(model.mu()))?;
    writeln!(f, "sigma {}", join(model.sigma()))?;
    Ok(())
}

/// Read a delay model written by [`write_model`].
pub fn read_model(path: &Path) -> Result<SchmmModel> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading model {}", path.display()))?;
    let mut n_states = None;
    let mut n_mixtures = None;
    let mut mask = None;
    let mut pi = Vec::new();
    let mut trans = Vec::new();
    let mut mix = Vec::new();
    let mut mu = Vec::new();
    let mut sigma = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap();
        let values: Vec<f64> = parts
            .map(|p| {
                p.parse::<f64>().map_err(|_| {
                    anyhow!("{}:{}: bad number {p:?}", path.display(), lineno + 1)
                })
            })
            .collect::<Result<_>>()?;
        match key {
            "n_states" => n_states = Some(values[0] as usize),
            "n_mixtures" => n_mixtures = Some(values[0] as usize),
            "mask" => mask = Some(values[0]),
            "pi" => pi = values,
            "trans" => trans.extend(values),
            "mix" => mix.extend(values),
            "mu" => mu = values,
            "sigma" => sigma = values,
            other => bail!(
                "{}:{}: unknown field {other:?}",
                path.display(),
                lineno + 1
            ),
        }
    }
    let n_states = n_states.ok_or_else(|| anyhow!("{}: missing n_states", path.display()))?;
    let n_mixtures =
        n_mixtures.ok_or_else(|| anyhow!("{}: missing n_mixtures", path.display()))?;
    let mask = mask.unwrap_or(DEFAULT_MASK_MS);
    SchmmModel::new(n_states, n_mixtures, pi, trans, mix, mu, sigma, mask)
        .map_err(|e| anyhow!("{}: invalid model: {e}", path.display()))
}

/// Read an edge-list graph: `i j` pairs, 0-based; an optional `agents N`
/// line pins the node count (needed for isolated single-agent graphs).
pub fn read_graph(path: &Path) -> Result<Topology> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading graph {}", path.display()))?;
    let mut edges = Vec::new();
    let mut n_agents: Option<usize> = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts[0] == "agents" {
            n_agents = Some(parts.get(1).and_then(|p| p.parse().ok()).ok_or_else(|| {
                anyhow!("{}:{}: bad agents line", path.display(), lineno + 1)
            })?);
            continue;
        }
        if parts.len() != 2 {
            bail!(
                "{}:{}: expected an `i j` edge, got {line:?}",
                path.display(),
                lineno + 1
            );
        }
        let a: usize = parts[0].parse().map_err(|_| {
            anyhow!("{}:{}: bad node {:?}", path.display(), lineno + 1, parts[0])
        })?;
        let b: usize = parts[1].parse().map_err(|_| {
            anyhow!("{}:{}: bad node {:?}", path.display(), lineno + 1, parts[1])
        })?;
        edges.push((a, b));
    }
    let inferred = edges
        .iter()
        .map(|&(a, b)| a.max(b) + 1)
        .max()
        .unwrap_or(0);
    let n = n_agents.unwrap_or(inferred).max(inferred);
    if n == 0 {
        bail!("{}: empty graph", path.display());
    }
    Topology::from_edges(n, &edges).map_err(|e| anyhow!("{}: {e}", path.display()))
}

pub fn write_graph(path: &Path, topology: &Topology) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("agents {}\n", topology.n_agents()));
    for (s, r) in topology.links() {
        if s < r {
            out.push_str(&format!("{s} {r}\n"));
        }
    }
    fs::write(path, out).with_context(|| format!("writing graph {}", path.display()))
}

fn join(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}
