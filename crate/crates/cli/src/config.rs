//! Run configuration: a TOML document naming the graph, dynamics, delay
//! models, weights, and schedule of a simulation.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use netcons_core::lmpc::{
    CostWeights, PvChoice, DEFAULT_ALPHA0, DEFAULT_DECREASE_EPSILON, DEFAULT_N_MAX,
    DEFAULT_V_RATIO,
};
use netcons_core::runtime::{ChannelSpec, SimSetup};
use netcons_core::topology::{AgentDynamics, Topology};
use netcons_core::{DEFAULT_BIN_MS, DEFAULT_MASK_MS};

use crate::formats;

/// Serialized form of a simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub steps: usize,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    /// Online learning rate.
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Sampling period in milliseconds.
    #[serde(default = "default_bin_ms")]
    pub bin_ms: f64,
    /// Prediction-history depth in samples.
    #[serde(default = "default_tau_max")]
    pub tau_max: usize,
    /// Dropout mask in milliseconds.
    #[serde(default = "default_mask_ms")]
    pub mask_ms: f64,
    /// Extra steps at which to snapshot per-neighbor models (0 and the
    /// final step are always recorded).
    #[serde(default)]
    pub snapshot_steps: Vec<usize>,
    pub graph: GraphConfig,
    pub dynamics: DynamicsConfig,
    pub channel: ChannelConfig,
    /// Initial per-neighbor delay model given to every agent.
    pub agent_model: PathBuf,
    #[serde(default)]
    pub weights: WeightsConfig,
}

fn default_eta() -> f64 {
    0.1
}

fn default_bin_ms() -> f64 {
    DEFAULT_BIN_MS
}

fn default_tau_max() -> usize {
    100
}

fn default_mask_ms() -> f64 {
    DEFAULT_MASK_MS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    /// Edge-list file; mutually exclusive with `complete`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    /// Complete graph on this many agents.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub complete: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsConfig {
    /// Named template; currently `double-integrator-3d` (n=6, m=4).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    /// Explicit row-major system matrix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<Vec<f64>>>,
    /// Translational coordinate indices for consensus metrics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translational: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    /// Ground-truth delay model sampled per link.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    /// Recorded trace replayed per link.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
    /// Fixed delay in milliseconds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constant_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsConfig {
    /// Diagonal of the per-agent state weight (defaults to ones).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_diag: Option<Vec<f64>>,
    /// Diagonal of the per-agent input weight (defaults to ones).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_diag: Option<Vec<f64>>,
    /// Uniform scale applied to the state weight.
    #[serde(default = "one")]
    pub p_scale: f64,
    /// Uniform scale applied to the input weight.
    #[serde(default = "one")]
    pub q_scale: f64,
    /// Lyapunov weight: `riccati` or `identity`.
    #[serde(default = "default_pv")]
    pub p_v: String,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    #[serde(default = "default_v_ratio")]
    pub v_ratio: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_alpha0")]
    pub alpha0: f64,
}

impl Default for WeightsConfig {
    fn default() -> Self {
        WeightsConfig {
            p_diag: None,
            q_diag: None,
            p_scale: 1.0,
            q_scale: 1.0,
            p_v: default_pv(),
            theta: default_theta(),
            n_max: default_n_max(),
            v_ratio: default_v_ratio(),
            epsilon: default_epsilon(),
            alpha0: default_alpha0(),
        }
    }
}

fn one() -> f64 {
    1.0
}

fn default_pv() -> String {
    "riccati".into()
}

fn default_theta() -> f64 {
    0.99
}

fn default_n_max() -> usize {
    DEFAULT_N_MAX
}

fn default_v_ratio() -> f64 {
    DEFAULT_V_RATIO
}

fn default_epsilon() -> f64 {
    DEFAULT_DECREASE_EPSILON
}

fn default_alpha0() -> f64 {
    DEFAULT_ALPHA0
}

impl SimConfig {
    pub fn load(path: &Path) -> Result<SimConfig> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: SimConfig = toml::from_str(&text)
            .map_err(|e| anyhow!("{}: {e}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing config")
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            bail!("steps: must be positive");
        }
        if !(0.0..=1.0).contains(&self.eta) {
            bail!("eta: {} outside [0, 1]", self.eta);
        }
        if self.bin_ms <= 0.0 {
            bail!("bin_ms: must be positive");
        }
        if self.tau_max == 0 {
            bail!("tau_max: must be positive");
        }
        match (&self.graph.file, self.graph.complete) {
            (Some(_), Some(_)) => bail!("graph: set either file or complete, not both"),
            (None, None) => bail!("graph: set file or complete"),
            _ => {}
        }
        let sources = [
            self.channel.model.is_some(),
            self.channel.trace.is_some(),
            self.channel.constant_ms.is_some(),
        ]
        .iter()
        .filter(|&&b| b)
        .count();
        if sources != 1 {
            bail!("channel: set exactly one of model, trace, constant_ms");
        }
        if !(0.0 < self.weights.theta && self.weights.theta < 1.0) {
            bail!("weights.theta: {} outside (0, 1)", self.weights.theta);
        }
        if self.weights.p_v != "riccati" && self.weights.p_v != "identity" {
            bail!("weights.p_v: {:?} is neither riccati nor identity", self.weights.p_v);
        }
        if let Some(d) = &self.weights.p_diag {
            if d.iter().any(|&v| v <= 0.0) {
                bail!("weights.p_diag: entries must be positive");
            }
        }
        if let Some(d) = &self.weights.q_diag {
            if d.iter().any(|&v| v <= 0.0) {
                bail!("weights.q_diag: entries must be positive");
            }
        }
        if self.weights.p_scale <= 0.0 || self.weights.q_scale <= 0.0 {
            bail!("weights scales must be positive");
        }
        Ok(())
    }

    /// Resolve a path relative to the config file's directory.
    fn resolve(&self, base: &Path, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            base.join(path)
        }
    }

    /// Load referenced files and assemble the runnable setup.
    /// `base` is the directory containing the config file.
    pub fn build_setup(&self, base: &Path) -> Result<SimSetup> {
        let topology = match (&self.graph.file, self.graph.complete) {
            (Some(file), None) => formats::read_graph(&self.resolve(base, file))?,
            (None, Some(n)) => Topology::complete(n).map_err(|e| anyhow!("graph: {e}"))?,
            _ => unreachable!("validated"),
        };
        let n_agents = topology.n_agents();

        let template = self.dynamics(n_agents)?;
        let (n, m) = (template[0].state_dim(), template[0].input_dim());

        let agent_model = formats::read_model(&self.resolve(base, &self.agent_model))?;

        let channel = if let Some(path) = &self.channel.model {
            ChannelSpec::Model(formats::read_model(&self.resolve(base, path))?)
        } else if let Some(path) = &self.channel.trace {
            ChannelSpec::Trace(formats::read_trace(&self.resolve(base, path), self.mask_ms)?)
        } else {
            ChannelSpec::Constant(self.channel.constant_ms.unwrap())
        };

        let weights = self.cost_weights(n, m)?;
        let mut snapshot_steps = self.snapshot_steps.clone();
        snapshot_steps.push(0);
        snapshot_steps.sort_unstable();
        snapshot_steps.dedup();

        Ok(SimSetup {
            topology,
            dynamics: template,
            weights,
            theta: self.weights.theta,
            channel,
            agent_model,
            eta: self.eta,
            bin_ms: self.bin_ms,
            tau_max: self.tau_max,
            steps: self.steps,
            master_seed: self.master_seed,
            snapshot_steps,
            initial_states: None,
        })
    }

    fn dynamics(&self, n_agents: usize) -> Result<Vec<AgentDynamics>> {
        let d = &self.dynamics;
        let one = match (&d.template, &d.a, &d.b) {
            (Some(name), None, None) => match name.as_str() {
                "double-integrator-3d" => {
                    AgentDynamics::double_integrator_3d(self.bin_ms / 1000.0)
                }
                other => bail!("dynamics.template: unknown template {other:?}"),
            },
            (None, Some(a), Some(b)) => {
                let a = matrix_from_rows(a).context("dynamics.a")?;
                let b = matrix_from_rows(b).context("dynamics.b")?;
                let translational = d
                    .translational
                    .clone()
                    .unwrap_or_else(|| (0..a.nrows()).collect());
                AgentDynamics::new(a, b, translational)
                    .map_err(|e| anyhow!("dynamics: {e}"))?
            }
            _ => bail!("dynamics: set template, or both a and b"),
        };
        Ok((0..n_agents).map(|_| one.clone()).collect())
    }

    fn cost_weights(&self, n: usize, m: usize) -> Result<CostWeights> {
        let w = &self.weights;
        let mut weights = CostWeights::identity(n, m);
        if let Some(diag) = &w.p_diag {
            if diag.len() != n {
                bail!("weights.p_diag: {} entries for state dimension {n}", diag.len());
            }
            weights.p = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(diag.clone()));
        }
        if let Some(diag) = &w.q_diag {
            if diag.len() != m {
                bail!("weights.q_diag: {} entries for input dimension {m}", diag.len());
            }
            weights.q = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(diag.clone()));
        }
        weights.p *= w.p_scale;
        weights.q *= w.q_scale;
        weights.p_v = match w.p_v.as_str() {
            "riccati" => PvChoice::Riccati,
            "identity" => PvChoice::Identity,
            _ => unreachable!("validated"),
        };
        weights.n_max = w.n_max;
        weights.v_ratio = w.v_ratio;
        weights.epsilon = w.epsilon;
        weights.alpha0 = w.alpha0;
        Ok(weights)
    }
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    if nrows == 0 {
        bail!("empty matrix");
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        bail!("ragged matrix rows");
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}
