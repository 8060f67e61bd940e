//! Distributed multi-agent consensus under time delays and packet dropouts.
//!
//! The crate bundles everything needed to run desk-scale consensus
//! experiments on lossy, delayed networks:
//!
//! - [`schmm`]: a semi-continuous hidden Markov model of per-link delay
//!   processes (shared Gaussian codebook plus one point-mass dropout
//!   component), with offline EM training, streaming single-observation
//!   updates, and most-likely-state delay prediction.
//! - [`topology`]: undirected communication graphs, per-agent neighborhood
//!   grouping, compact per-agent system matrices, and consensus-error maps.
//! - [`lmpc`]: Lyapunov-certified state-feedback gain synthesis via a
//!   discrete Riccati fixed point, plus the feasibility checkers, cost and
//!   adaptive-horizon rules used by the runtime.
//! - [`channel`]: a packet-level event queue that applies per-link delays
//!   and dropouts to broadcast frames.
//! - [`runtime`]: the per-agent control loop (receive, estimate delay,
//!   update model, predict neighbors, actuate, broadcast) and the
//!   deterministic whole-system simulator.
//!
//! The crate is `no_std` (with `alloc`); all file formats, CSV telemetry
//! and the command-line front end live in the companion `netcons` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod channel;
pub mod lmpc;
pub mod rng;
pub mod runtime;
pub mod schmm;
pub mod topology;

pub use channel::{Channel, DelaySource, PacketFrame};
pub use lmpc::{CostWeights, GainSolution, PvChoice};
pub use runtime::{run_simulation, AgentRuntime, ChannelSpec, SimResult, SimSetup};
pub use schmm::{DelayPrediction, DelayTrace, FilterState, SchmmModel};
pub use topology::{AgentDynamics, CompactSystem, Topology};

/// Sentinel delay value (ms) that encodes a packet dropout in traces and
/// as the point-mass component mean.
pub const DEFAULT_MASK_MS: f64 = 1e5;

/// Default sampling period / emission bin width in milliseconds.
pub const DEFAULT_BIN_MS: f64 = 10.0;
