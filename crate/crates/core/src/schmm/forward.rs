//! Scaled forward-backward recursion and log-likelihood evaluation.

use alloc::vec;
use alloc::vec::Vec;

// f64 math comes from the trait under no_std; std test builds use the
// inherent methods instead.
#[allow(unused_imports)]
use num_traits::Float;

use super::model::{normalize, DelayTrace, SchmmError, SchmmModel};

/// Result of a forward-backward pass with per-step scaling.
///
/// `alpha` and `beta` are stored row-major as `T x n_states`; each `alpha`
/// row is normalized to sum to 1 and `scale[t]` holds the normalizer, so
/// `log_likelihood = sum(ln(scale))`.
#[derive(Debug, Clone)]
pub struct ForwardBackward {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub scale: Vec<f64>,
    pub log_likelihood: f64,
    n_states: usize,
}

impl ForwardBackward {
    pub fn alpha_row(&self, t: usize) -> &[f64] {
        &self.alpha[t * self.n_states..(t + 1) * self.n_states]
    }

    pub fn beta_row(&self, t: usize) -> &[f64] {
        &self.beta[t * self.n_states..(t + 1) * self.n_states]
    }

    /// Posterior state distribution at step `t` (sums to 1).
    pub fn state_posterior(&self, t: usize) -> Vec<f64> {
        let mut z: Vec<f64> = self
            .alpha_row(t)
            .iter()
            .zip(self.beta_row(t))
            .map(|(a, b)| a * b)
            .collect();
        normalize(&mut z);
        z
    }
}

/// Per-observation emission masses for the whole trace, `T x n_states`
/// totals plus the per-component breakdown `T x n_states x n_mixtures`.
pub(crate) struct EmissionTable {
    pub totals: Vec<f64>,
    pub components: Vec<f64>,
    pub n_states: usize,
    pub n_mixtures: usize,
}

impl EmissionTable {
    pub fn build(model: &SchmmModel, trace: &DelayTrace, bin_ms: f64) -> Result<Self, SchmmError> {
        let n = model.n_states();
        let m = model.n_mixtures();
        let t_len = trace.len();
        let mut totals = vec![0.0; t_len * n];
        let mut components = vec![0.0; t_len * n * m];
        for (t, &tau) in trace.samples().iter().enumerate() {
            for i in 0..n {
                let e = model.emission_weight(i, tau, bin_ms)?;
                totals[t * n + i] = e.total;
                components[(t * n + i) * m..(t * n + i + 1) * m].copy_from_slice(&e.components);
            }
        }
        Ok(EmissionTable {
            totals,
            components,
            n_states: n,
            n_mixtures: m,
        })
    }

    pub fn total(&self, t: usize, i: usize) -> f64 {
        self.totals[t * self.n_states + i]
    }

    pub fn component(&self, t: usize, i: usize, g: usize) -> f64 {
        self.components[(t * self.n_states + i) * self.n_mixtures + g]
    }
}

/// Run the scaled forward-backward recursion over a trace.
///
/// Fails with [`SchmmError::EmissionUnderflow`] naming the first step where
/// every state assigns zero mass to the observation.
pub fn forward_backward(
    model: &SchmmModel,
    trace: &DelayTrace,
    bin_ms: f64,
) -> Result<ForwardBackward, SchmmError> {
    let emissions = EmissionTable::build(model, trace, bin_ms)?;
    forward_backward_with(model, trace.len(), &emissions)
}

pub(crate) fn forward_backward_with(
    model: &SchmmModel,
    t_len: usize,
    emissions: &EmissionTable,
) -> Result<ForwardBackward, SchmmError> {
    if t_len == 0 {
        return Err(SchmmError::EmptyTrace);
    }
    let n = model.n_states();
    let mut alpha = vec![0.0; t_len * n];
    let mut beta = vec![0.0; t_len * n];
    let mut scale = vec![0.0; t_len];

    for i in 0..n {
        alpha[i] = model.pi()[i] * emissions.total(0, i);
    }
    scale[0] = alpha[..n].iter().sum();
    if scale[0] <= 0.0 {
        return Err(SchmmError::EmissionUnderflow { t: 0 });
    }
    for i in 0..n {
        alpha[i] /= scale[0];
    }

    for t in 1..t_len {
        for j in 0..n {
            let mut acc = 0.0;
            for i in 0..n {
                acc += alpha[(t - 1) * n + i] * model.trans_at(i, j);
            }
            alpha[t * n + j] = acc * emissions.total(t, j);
        }
        scale[t] = alpha[t * n..(t + 1) * n].iter().sum();
        if scale[t] <= 0.0 {
            return Err(SchmmError::EmissionUnderflow { t });
        }
        for j in 0..n {
            alpha[t * n + j] /= scale[t];
        }
    }

    for i in 0..n {
        beta[(t_len - 1) * n + i] = 1.0;
    }
    for t in (0..t_len - 1).rev() {
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += model.trans_at(i, j) * emissions.total(t + 1, j) * beta[(t + 1) * n + j];
            }
            beta[t * n + i] = acc / scale[t + 1];
        }
    }

    let log_likelihood = scale.iter().map(|c| c.ln()).sum();
    Ok(ForwardBackward {
        alpha,
        beta,
        scale,
        log_likelihood,
        n_states: n,
    })
}
