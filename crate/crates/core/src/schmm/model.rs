//! Model and trace types for the semi-continuous delay/dropout process.
//!
//! A model has `n_states` hidden states sharing a codebook of `n_mixtures`
//! emission components: the first `n_mixtures - 1` are Gaussians over delay
//! values in milliseconds, the last is a point mass at the dropout mask.
//! Emissions are treated as probability mass per sampling bin (Gaussian
//! density times the bin width versus the point-mass weight), so the two
//! kinds of component live on the same scale.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

// f64 math comes from the trait under no_std; std test builds use the
// inherent methods instead.
#[allow(unused_imports)]
use num_traits::Float;

/// Tolerance for probability-vector and row-sum invariants.
pub const PROB_TOL: f64 = 1e-9;

/// Standard deviation assigned to the dropout point mass (ms).
pub const DIRAC_SIGMA_MS: f64 = 1e-4;

/// Variance floor applied in every parameter update (ms^2).
pub const MIN_VARIANCE: f64 = 1e-8;

/// Mixture-weight floor applied when a component is starved.
pub const WEIGHT_FLOOR: f64 = 1e-6;

/// Errors produced by delay-model construction and inference.
#[derive(Debug, Clone, PartialEq)]
pub enum SchmmError {
    /// A dimension or probability invariant was violated.
    Invalid(String),
    /// An observed delay was not strictly positive.
    NonPositiveDelay(f64),
    /// A trace sample was neither in (0, mask) nor exactly the mask.
    BadTraceSample { index: usize, value: f64 },
    /// Every state assigned zero emission mass to the observation at `t`.
    EmissionUnderflow { t: usize },
    /// The trace is empty (or too short for the requested operation).
    EmptyTrace,
    /// Fewer distinct non-dropout delays than requested clusters.
    TooFewDistinctDelays { distinct: usize, clusters: usize },
    /// No predicted history to match a received state against.
    EmptyHistory,
}

impl fmt::Display for SchmmError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchmmError::Invalid(msg) => write!(f, "invalid model: {msg}"),
            SchmmError::NonPositiveDelay(tau) => {
                write!(f, "delay must be positive, got {tau}")
            }
            SchmmError::BadTraceSample { index, value } => {
                write!(f, "trace sample {index} = {value} is neither a valid delay nor the mask")
            }
            SchmmError::EmissionUnderflow { t } => {
                write!(f, "all states assign zero emission mass at observation {t}")
            }
            SchmmError::EmptyTrace => write!(f, "trace is empty or too short"),
            SchmmError::TooFewDistinctDelays { distinct, clusters } => write!(
                f,
                "only {distinct} distinct delays for {clusters} clusters; reduce the cluster count"
            ),
            SchmmError::EmptyHistory => write!(f, "predicted-state history is empty"),
        }
    }
}

impl core::error::Error for SchmmError {}

/// Semi-continuous hidden Markov model of a single link's delay process.
#[derive(Debug, Clone, PartialEq)]
pub struct SchmmModel {
    n_states: usize,
    n_mixtures: usize,
    pi: Vec<f64>,
    trans: Vec<f64>, // row-major n_states x n_states
    mix: Vec<f64>,   // row-major n_states x n_mixtures
    mu: Vec<f64>,    // component means (ms); last entry equals the mask
    sigma: Vec<f64>, // component standard deviations (ms)
    mask: f64,
}

impl SchmmModel {
    /// Build a model, validating all probability and dimension invariants.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_states: usize,
        n_mixtures: usize,
        pi: Vec<f64>,
        trans: Vec<f64>,
        mix: Vec<f64>,
        mu: Vec<f64>,
        sigma: Vec<f64>,
        mask: f64,
    ) -> Result<Self, SchmmError> {
        if n_states == 0 {
            return Err(SchmmError::Invalid("n_states must be positive".into()));
        }
        if n_mixtures < 2 {
            return Err(SchmmError::Invalid(
                "n_mixtures must be at least 2 (one Gaussian plus the dropout component)".into(),
            ));
        }
        if pi.len() != n_states {
            return Err(SchmmError::Invalid(format!(
                "pi length {} != n_states {n_states}",
                pi.len()
            )));
        }
        if trans.len() != n_states * n_states {
            return Err(SchmmError::Invalid(format!(
                "trans length {} != n_states^2 {}",
                trans.len(),
                n_states * n_states
            )));
        }
        if mix.len() != n_states * n_mixtures {
            return Err(SchmmError::Invalid(format!(
                "mix length {} != n_states*n_mixtures {}",
                mix.len(),
                n_states * n_mixtures
            )));
        }
        if mu.len() != n_mixtures || sigma.len() != n_mixtures {
            return Err(SchmmError::Invalid(format!(
                "mu/sigma lengths {}/{} != n_mixtures {n_mixtures}",
                mu.len(),
                sigma.len()
            )));
        }
        let model = SchmmModel {
            n_states,
            n_mixtures,
            pi,
            trans,
            mix,
            mu,
            sigma,
            mask,
        };
        model.validate()?;
        Ok(model)
    }

    /// Check every model invariant; used after construction and updates.
    pub fn validate(&self) -> Result<(), SchmmError> {
        check_prob_vector("pi", &self.pi)?;
        for i in 0..self.n_states {
            check_prob_vector(
                &format!("trans row {i}"),
                &self.trans[i * self.n_states..(i + 1) * self.n_states],
            )?;
            check_prob_vector(
                &format!("mix row {i}"),
                &self.mix[i * self.n_mixtures..(i + 1) * self.n_mixtures],
            )?;
        }
        for (g, &s) in self.sigma.iter().enumerate() {
            if !(s > 0.0) {
                return Err(SchmmError::Invalid(format!("sigma[{g}] = {s} is not positive")));
            }
        }
        if self.mu[self.n_mixtures - 1] != self.mask {
            return Err(SchmmError::Invalid(format!(
                "dropout component mean {} != mask {}",
                self.mu[self.n_mixtures - 1],
                self.mask
            )));
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_mixtures(&self) -> usize {
        self.n_mixtures
    }

    pub fn pi(&self) -> &[f64] {
        &self.pi
    }

    pub fn trans(&self) -> &[f64] {
        &self.trans
    }

    pub fn mix(&self) -> &[f64] {
        &self.mix
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn mask(&self) -> f64 {
        self.mask
    }

    /// Transition probability state `i` -> state `j`.
    pub fn trans_at(&self, i: usize, j: usize) -> f64 {
        self.trans[i * self.n_states + j]
    }

    /// Weight of codebook component `g` in state `i`.
    pub fn mix_at(&self, i: usize, g: usize) -> f64 {
        self.mix[i * self.n_mixtures + g]
    }

    pub(crate) fn trans_row(&self, i: usize) -> &[f64] {
        &self.trans[i * self.n_states..(i + 1) * self.n_states]
    }

    pub(crate) fn mix_row(&self, i: usize) -> &[f64] {
        &self.mix[i * self.n_mixtures..(i + 1) * self.n_mixtures]
    }

    pub(crate) fn set_pi(&mut self, pi: Vec<f64>) {
        self.pi = pi;
    }

    pub(crate) fn set_trans(&mut self, trans: Vec<f64>) {
        self.trans = trans;
    }

    pub(crate) fn set_mix(&mut self, mix: Vec<f64>) {
        self.mix = mix;
    }

    pub(crate) fn set_gaussian(&mut self, g: usize, mu: f64, sigma: f64) {
        debug_assert!(g + 1 < self.n_mixtures, "dropout component is pinned");
        self.mu[g] = mu;
        self.sigma[g] = sigma;
    }

    /// Per-component weighted emission mass for `tau` in state `state`,
    /// together with the total `b_state(tau)`.
    ///
    /// Delays equal to the mask put all mass on the dropout component;
    /// any other delay is explained by the Gaussian codebook only, with the
    /// densities converted to per-bin masses via `bin_ms`.
    pub fn emission_weight(
        &self,
        state: usize,
        tau: f64,
        bin_ms: f64,
    ) -> Result<EmissionWeight, SchmmError> {
        if !(tau > 0.0) {
            return Err(SchmmError::NonPositiveDelay(tau));
        }
        let m = self.n_mixtures;
        let mut components = vec![0.0; m];
        if tau == self.mask {
            components[m - 1] = self.mix_at(state, m - 1);
        } else {
            for g in 0..m - 1 {
                components[g] =
                    self.mix_at(state, g) * gaussian_pdf(tau, self.mu[g], self.sigma[g]) * bin_ms;
            }
        }
        let total = components.iter().sum();
        Ok(EmissionWeight { components, total })
    }

    /// Stationary distribution of the transition matrix (power iteration).
    pub fn stationary(&self) -> Vec<f64> {
        let n = self.n_states;
        let mut s = vec![1.0 / n as f64; n];
        for _ in 0..10_000 {
            let mut next = vec![0.0; n];
            for i in 0..n {
                for j in 0..n {
                    next[j] += s[i] * self.trans_at(i, j);
                }
            }
            let norm: f64 = next.iter().sum();
            for v in next.iter_mut() {
                *v /= norm;
            }
            let delta = s
                .iter()
                .zip(&next)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            s = next;
            if delta < 1e-14 {
                break;
            }
        }
        s
    }

    /// Probability that a packet sampled from the stationary process drops.
    pub fn stationary_dropout_probability(&self) -> f64 {
        let s = self.stationary();
        (0..self.n_states)
            .map(|i| s[i] * self.mix_at(i, self.n_mixtures - 1))
            .sum()
    }
}

/// Emission mass of one observation, per codebook component and in total.
#[derive(Debug, Clone)]
pub struct EmissionWeight {
    pub components: Vec<f64>,
    pub total: f64,
}

/// An ordered sequence of per-packet delays; dropouts are encoded by the
/// mask value.
#[derive(Debug, Clone, PartialEq)]
pub struct DelayTrace {
    samples: Vec<f64>,
    mask: f64,
}

impl DelayTrace {
    pub fn new(samples: Vec<f64>, mask: f64) -> Result<Self, SchmmError> {
        for (index, &value) in samples.iter().enumerate() {
            let valid = (value > 0.0 && value < mask) || value == mask;
            if !valid {
                return Err(SchmmError::BadTraceSample { index, value });
            }
        }
        Ok(DelayTrace { samples, mask })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn mask(&self) -> f64 {
        self.mask
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dropout_count(&self) -> usize {
        self.samples.iter().filter(|&&v| v == self.mask).count()
    }

    /// Non-dropout delay values.
    pub fn delays(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().copied().filter(move |&v| v != self.mask)
    }

    /// Map every delay to the midpoint of its sampling bin; dropouts are
    /// kept as-is. This is the observation process seen by an agent that
    /// recovers delays in whole sampling periods.
    pub fn quantized(&self, bin_ms: f64) -> DelayTrace {
        let samples = self
            .samples
            .iter()
            .map(|&v| {
                if v == self.mask {
                    v
                } else {
                    ((v / bin_ms).ceil() - 0.5) * bin_ms
                }
            })
            .collect();
        DelayTrace {
            samples,
            mask: self.mask,
        }
    }
}

/// Filtered hidden-state distribution maintained per link.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub(crate) alpha: Vec<f64>,
    pub(crate) last_state: usize,
    pub(crate) t: u64,
}

impl FilterState {
    /// Fresh filter holding the model's initial state distribution.
    pub fn new(model: &SchmmModel) -> Self {
        let alpha = model.pi().to_vec();
        let last_state = argmax(&alpha);
        FilterState {
            alpha,
            last_state,
            t: 0,
        }
    }

    /// Filtered probability of each hidden state.
    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// Most likely current hidden state.
    pub fn last_state(&self) -> usize {
        self.last_state
    }

    /// Number of observations absorbed so far.
    pub fn observations(&self) -> u64 {
        self.t
    }
}

/// Gaussian probability density.
pub(crate) fn gaussian_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * core::f64::consts::PI).sqrt())
}

/// Index of the largest entry, ties to the lowest index.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn normalize(xs: &mut [f64]) {
    let sum: f64 = xs.iter().sum();
    if sum > 0.0 {
        for x in xs.iter_mut() {
            *x /= sum;
        }
    }
}

fn check_prob_vector(name: &str, xs: &[f64]) -> Result<(), SchmmError> {
    let mut sum = 0.0;
    for &x in xs {
        if !(0.0..=1.0 + PROB_TOL).contains(&x) || !x.is_finite() {
            return Err(SchmmError::Invalid(format!(
                "{name}: entry {x} outside [0, 1]"
            )));
        }
        sum += x;
    }
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(SchmmError::Invalid(format!("{name}: sums to {sum}, not 1")));
    }
    Ok(())
}
