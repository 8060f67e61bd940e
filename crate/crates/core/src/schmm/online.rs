//! Streaming operation: single-observation parameter updates, filtered
//! state tracking, and next-delay prediction.

use alloc::vec;
use alloc::vec::Vec;

// f64 math comes from the trait under no_std; std test builds use the
// inherent methods instead.
#[allow(unused_imports)]
use num_traits::Float;

use super::model::{argmax, normalize, FilterState, SchmmError, SchmmModel, MIN_VARIANCE};
use crate::DEFAULT_BIN_MS;

/// Predicted next delay: either a concrete value in milliseconds or a
/// dropout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DelayPrediction {
    Delay(f64),
    Dropout,
}

/// Whether a streaming update was applied or the observation rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateOutcome {
    Applied,
    /// The observation carried no emission mass in any state (or was not a
    /// valid delay); the model is returned unchanged.
    Rejected,
}

/// Single-observation convex-combination update of `(pi, trans, mu, sigma)`.
///
/// The E-step forms the one-step posteriors from the current priors and
/// emission weights; the M-step blends them in with learning rate `eta`.
/// Gaussian means and variances move with an effective rate `eta * r_g`,
/// where `r_g` is the observation's responsibility mass on component `g`,
/// so components that do not explain the observation are left untouched.
/// Mixture weights are not updated. `eta = 0` returns the model bitwise
/// unchanged.
pub fn incremental_em_update(
    model: &SchmmModel,
    tau_prev: f64,
    eta: f64,
) -> (SchmmModel, UpdateOutcome) {
    incremental_em_update_binned(model, tau_prev, eta, DEFAULT_BIN_MS)
}

pub fn incremental_em_update_binned(
    model: &SchmmModel,
    tau_prev: f64,
    eta: f64,
    bin_ms: f64,
) -> (SchmmModel, UpdateOutcome) {
    debug_assert!((0.0..=1.0).contains(&eta));
    if eta == 0.0 {
        return (model.clone(), UpdateOutcome::Applied);
    }
    let n = model.n_states();
    let m = model.n_mixtures();

    let mut emissions = Vec::with_capacity(n);
    for i in 0..n {
        match model.emission_weight(i, tau_prev, bin_ms) {
            Ok(e) => emissions.push(e),
            Err(_) => {
                log::warn!("rejecting invalid delay observation {tau_prev}");
                return (model.clone(), UpdateOutcome::Rejected);
            }
        }
    }
    let evidence: f64 = (0..n).map(|i| model.pi()[i] * emissions[i].total).sum();
    if evidence <= 0.0 {
        log::warn!("rejecting delay observation {tau_prev}: zero emission mass in every state");
        return (model.clone(), UpdateOutcome::Rejected);
    }

    // E-step: gamma(i) and gamma(i, j) from the current priors
    let mut gamma = vec![0.0; n];
    for i in 0..n {
        gamma[i] = model.pi()[i] * emissions[i].total / evidence;
    }
    let mut gamma_pair = vec![0.0; n * n];
    let mut pair_total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let v = model.pi()[i] * model.trans_at(i, j) * emissions[j].total;
            gamma_pair[i * n + j] = v;
            pair_total += v;
        }
    }
    for v in gamma_pair.iter_mut() {
        *v /= pair_total;
    }

    // M-step
    let mut updated = model.clone();

    let mut pi = vec![0.0; n];
    for i in 0..n {
        pi[i] = (1.0 - eta) * model.pi()[i] + eta * gamma[i];
    }
    normalize(&mut pi);
    updated.set_pi(pi);

    let mut trans = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            trans[i * n + j] =
                (1.0 - eta) * model.trans_at(i, j) + eta * gamma_pair[i * n + j];
        }
        normalize(&mut trans[i * n..(i + 1) * n]);
    }
    updated.set_trans(trans);

    if tau_prev != model.mask() {
        for g in 0..m - 1 {
            // responsibility of component g for this observation,
            // aggregated over states
            let r: f64 = (0..n)
                .map(|i| {
                    if emissions[i].total > 0.0 {
                        gamma[i] * emissions[i].components[g] / emissions[i].total
                    } else {
                        0.0
                    }
                })
                .sum();
            if r <= 0.0 {
                continue;
            }
            let rate = eta * r;
            let mu = (1.0 - rate) * model.mu()[g] + rate * tau_prev;
            let sigma2 = (1.0 - rate) * model.sigma()[g] * model.sigma()[g]
                + rate * (tau_prev - mu) * (tau_prev - mu);
            updated.set_gaussian(g, mu, sigma2.max(MIN_VARIANCE).sqrt());
        }
    }

    debug_assert!(updated.validate().is_ok());
    (updated, UpdateOutcome::Applied)
}

/// Advance the filtered state distribution with one observed delay.
///
/// Observations with zero emission mass leave the distribution at the
/// transition-propagated prior (no conditioning), keeping the filter causal
/// and well-defined.
pub fn filter_update(
    model: &SchmmModel,
    filter: &FilterState,
    tau: f64,
    bin_ms: f64,
) -> FilterState {
    let n = model.n_states();
    let mut predicted = vec![0.0; n];
    if filter.t == 0 {
        predicted.copy_from_slice(filter.alpha());
    } else {
        for j in 0..n {
            for i in 0..n {
                predicted[j] += filter.alpha[i] * model.trans_at(i, j);
            }
        }
    }
    let mut alpha = vec![0.0; n];
    let mut total = 0.0;
    for i in 0..n {
        let b = model
            .emission_weight(i, tau, bin_ms)
            .map(|e| e.total)
            .unwrap_or(0.0);
        alpha[i] = predicted[i] * b;
        total += alpha[i];
    }
    if total > 0.0 {
        for a in alpha.iter_mut() {
            *a /= total;
        }
    } else {
        alpha.copy_from_slice(&predicted);
        normalize(&mut alpha);
    }
    let last_state = argmax(&alpha);
    FilterState {
        alpha,
        last_state,
        t: filter.t + 1,
    }
}

/// Predict the next delay from the filtered state.
///
/// Step 1 conditions the filter on `tau_prev` and takes the most likely
/// current state; step 2 follows the most probable transition; step 3
/// reports the mean of the heaviest codebook component in the predicted
/// state, or a dropout when the point mass dominates. All argmax ties break
/// toward the lowest index.
pub fn viterbi_predict(
    model: &SchmmModel,
    filter: &FilterState,
    tau_prev: f64,
) -> (DelayPrediction, FilterState) {
    let updated = filter_update(model, filter, tau_prev, DEFAULT_BIN_MS);
    let prediction = predict_from_state(model, updated.last_state);
    (prediction, updated)
}

/// Steps 2 and 3 of the prediction: used directly when no observation is
/// available yet (cold start).
pub fn predict_from_state(model: &SchmmModel, current_state: usize) -> DelayPrediction {
    let next_state = argmax(model.trans_row(current_state));
    let g = argmax(model.mix_row(next_state));
    if g == model.n_mixtures() - 1 {
        DelayPrediction::Dropout
    } else {
        DelayPrediction::Delay(model.mu()[g])
    }
}

/// Pick the lag whose predicted state best matches a received state.
///
/// Scans `predicted_history` entries with `lag <= tau_max` and returns the
/// lag minimizing the Euclidean distance to `received`; ties break toward
/// the smallest lag.
pub fn estimate_prev_delay(
    received: &[f64],
    predicted_history: &[(usize, &[f64])],
    tau_max: usize,
) -> Result<usize, SchmmError> {
    let mut best: Option<(usize, f64)> = None;
    for &(lag, state) in predicted_history {
        if lag > tau_max {
            continue;
        }
        let dist2: f64 = received
            .iter()
            .zip(state)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let better = match best {
            None => true,
            Some((blag, bdist)) => dist2 < bdist || (dist2 == bdist && lag < blag),
        };
        if better {
            best = Some((lag, dist2));
        }
    }
    best.map(|(lag, _)| lag).ok_or(SchmmError::EmptyHistory)
}
