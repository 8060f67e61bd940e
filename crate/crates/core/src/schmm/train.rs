//! Offline training: k-means initialization and batch EM.

use alloc::vec;
use alloc::vec::Vec;

// f64 math comes from the trait under no_std; std test builds use the
// inherent methods instead.
#[allow(unused_imports)]
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;

use super::forward::{forward_backward_with, EmissionTable};
use super::model::{
    DelayTrace, SchmmError, SchmmModel, DIRAC_SIGMA_MS, MIN_VARIANCE, WEIGHT_FLOOR,
};
use crate::rng::chacha;
use crate::DEFAULT_BIN_MS;

/// Result of a batch EM fit.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub model: SchmmModel,
    /// Log-likelihood of the model *before* each update, one entry per
    /// iteration performed plus a final entry for the returned model.
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
}

/// Initialize a model from a trace: uniform priors, transitions and mixture
/// weights, Gaussian means/deviations from k-means over the non-dropout
/// delays, dropout component pinned at the mask.
pub fn init_model(
    n_states: usize,
    n_mixtures: usize,
    trace: &DelayTrace,
    mask: f64,
    rng_seed: u64,
) -> Result<SchmmModel, SchmmError> {
    if n_mixtures < 2 {
        return Err(SchmmError::Invalid(
            "need at least one Gaussian plus the dropout component".into(),
        ));
    }
    let delays: Vec<f64> = trace.delays().collect();
    let k = n_mixtures - 1;
    let (mut mu, mut sigma) = kmeans_1d(&delays, k, rng_seed)?;
    mu.push(mask);
    sigma.push(DIRAC_SIGMA_MS);
    let pi = vec![1.0 / n_states as f64; n_states];
    let trans = vec![1.0 / n_states as f64; n_states * n_states];
    let mix = vec![1.0 / n_mixtures as f64; n_states * n_mixtures];
    SchmmModel::new(n_states, n_mixtures, pi, trans, mix, mu, sigma, mask)
}

/// One-dimensional k-means (k-means++ seeding, Lloyd refinement).
/// Returns cluster means and population standard deviations, sorted by mean.
pub fn kmeans_1d(xs: &[f64], k: usize, rng_seed: u64) -> Result<(Vec<f64>, Vec<f64>), SchmmError> {
    let mut distinct: Vec<f64> = xs.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    if distinct.len() < k {
        return Err(SchmmError::TooFewDistinctDelays {
            distinct: distinct.len(),
            clusters: k,
        });
    }

    let mut rng = chacha(rng_seed);
    let mut centers = Vec::with_capacity(k);
    centers.push(xs[rng.gen_range(0..xs.len())]);
    while centers.len() < k {
        let d2: Vec<f64> = xs
            .iter()
            .map(|&x| {
                centers
                    .iter()
                    .map(|&c| (x - c) * (x - c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            // all points coincide with chosen centers; seed from the
            // remaining distinct values instead
            let next = distinct
                .iter()
                .find(|v| !centers.contains(v))
                .copied()
                .expect("distinct.len() >= k");
            centers.push(next);
            continue;
        }
        let mut u: f64 = rng.gen::<f64>() * total;
        let mut chosen = xs[xs.len() - 1];
        for (&x, &w) in xs.iter().zip(&d2) {
            u -= w;
            if u <= 0.0 {
                chosen = x;
                break;
            }
        }
        centers.push(chosen);
    }

    let mut assign = vec![0usize; xs.len()];
    for _ in 0..100 {
        let mut moved = false;
        for (a, &x) in assign.iter_mut().zip(xs) {
            let mut best = 0;
            for (j, &c) in centers.iter().enumerate() {
                if (x - c).abs() < (x - centers[best]).abs() {
                    best = j;
                }
            }
            if *a != best {
                *a = best;
                moved = true;
            }
        }
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (&a, &x) in assign.iter().zip(xs) {
            sums[a] += x;
            counts[a] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j] / counts[j] as f64;
            }
        }
        if !moved {
            break;
        }
    }

    let mut stats: Vec<(f64, f64)> = (0..k)
        .map(|j| {
            let members: Vec<f64> = assign
                .iter()
                .zip(xs)
                .filter(|(&a, _)| a == j)
                .map(|(_, &x)| x)
                .collect();
            if members.is_empty() {
                (centers[j], DIRAC_SIGMA_MS)
            } else {
                let mean = members.iter().sum::<f64>() / members.len() as f64;
                let var =
                    members.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / members.len() as f64;
                (mean, var.sqrt().max(DIRAC_SIGMA_MS))
            }
        })
        .collect();
    stats.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mu = stats.iter().map(|s| s.0).collect();
    let sigma = stats.iter().map(|s| s.1).collect();
    Ok((mu, sigma))
}

/// Batch EM (Baum-Welch adapted to the shared codebook).
///
/// The dropout component's mean and deviation stay pinned; its weight column
/// is re-estimated with the rest of the mixture matrix. Starved mixture
/// weights are floored at [`WEIGHT_FLOOR`] and the row renormalized.
pub fn em_fit(
    model0: &SchmmModel,
    trace: &DelayTrace,
    max_iters: usize,
    tol: f64,
) -> Result<EmFit, SchmmError> {
    em_fit_binned(model0, trace, max_iters, tol, DEFAULT_BIN_MS)
}

pub fn em_fit_binned(
    model0: &SchmmModel,
    trace: &DelayTrace,
    max_iters: usize,
    tol: f64,
    bin_ms: f64,
) -> Result<EmFit, SchmmError> {
    if trace.len() < 2 {
        return Err(SchmmError::EmptyTrace);
    }
    model0.validate()?;
    let n = model0.n_states();
    let m = model0.n_mixtures();
    let t_len = trace.len();
    let mask = trace.mask();

    let mut model = model0.clone();
    let mut history = Vec::with_capacity(max_iters + 1);
    let mut converged = false;

    for _iter in 0..max_iters {
        let emissions = EmissionTable::build(&model, trace, bin_ms)?;
        let fb = forward_backward_with(&model, t_len, &emissions)?;
        if let Some(&prev) = history.last() {
            if fb.log_likelihood - prev < tol {
                history.push(fb.log_likelihood);
                converged = true;
                break;
            }
        }
        history.push(fb.log_likelihood);

        // state posteriors zeta_t(i)
        let mut zeta = vec![0.0; t_len * n];
        for t in 0..t_len {
            let z = fb.state_posterior(t);
            zeta[t * n..(t + 1) * n].copy_from_slice(&z);
        }

        // transition posteriors, accumulated over t
        let mut trans_num = vec![0.0; n * n];
        let mut trans_den = vec![0.0; n];
        for t in 0..t_len - 1 {
            let mut block = vec![0.0; n * n];
            let mut total = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let v = fb.alpha_row(t)[i]
                        * model.trans_at(i, j)
                        * emissions.total(t + 1, j)
                        * fb.beta_row(t + 1)[j];
                    block[i * n + j] = v;
                    total += v;
                }
            }
            if total > 0.0 {
                for i in 0..n {
                    for j in 0..n {
                        trans_num[i * n + j] += block[i * n + j] / total;
                    }
                }
            }
            for i in 0..n {
                trans_den[i] += zeta[t * n + i];
            }
        }

        // component responsibilities xi_t(i, g)
        let mut mix_num = vec![0.0; n * m];
        let mut state_occ = vec![0.0; n];
        let mut comp_resp = vec![0.0; t_len * m];
        for t in 0..t_len {
            for i in 0..n {
                let total = emissions.total(t, i);
                if total <= 0.0 {
                    continue;
                }
                let z = zeta[t * n + i];
                for g in 0..m {
                    let r = z * emissions.component(t, i, g) / total;
                    mix_num[i * m + g] += r;
                    comp_resp[t * m + g] += r;
                }
            }
            for i in 0..n {
                state_occ[i] += zeta[t * n + i];
            }
        }

        // M-step
        let pi = zeta[..n].to_vec();

        let mut trans = vec![0.0; n * n];
        for i in 0..n {
            if trans_den[i] > 1e-300 {
                for j in 0..n {
                    trans[i * n + j] = trans_num[i * n + j] / trans_den[i];
                }
                let row = &mut trans[i * n..(i + 1) * n];
                let sum: f64 = row.iter().sum();
                if sum > 0.0 {
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                } else {
                    row.copy_from_slice(model.trans_row(i));
                }
            } else {
                trans[i * n..(i + 1) * n].copy_from_slice(model.trans_row(i));
            }
        }

        let mut mix = vec![0.0; n * m];
        let mut floored = false;
        for i in 0..n {
            for g in 0..m {
                mix[i * m + g] = if state_occ[i] > 1e-300 {
                    mix_num[i * m + g] / state_occ[i]
                } else {
                    model.mix_at(i, g)
                };
            }
            let row = &mut mix[i * m..(i + 1) * m];
            for v in row.iter_mut() {
                if *v < WEIGHT_FLOOR {
                    *v = WEIGHT_FLOOR;
                    floored = true;
                }
            }
            let sum: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        if floored {
            log::warn!("starved mixture component: weight floored at {WEIGHT_FLOOR}");
        }

        model.set_pi(pi);
        model.set_trans(trans);
        model.set_mix(mix);

        // shared-codebook Gaussian update; dropout samples carry zero
        // Gaussian responsibility by construction
        for g in 0..m - 1 {
            let mut weight = 0.0;
            let mut mean_acc = 0.0;
            for (t, &tau) in trace.samples().iter().enumerate() {
                if tau == mask {
                    continue;
                }
                let r = comp_resp[t * m + g];
                weight += r;
                mean_acc += r * tau;
            }
            if weight < 1e-300 {
                log::warn!("Gaussian component {g} starved; keeping previous parameters");
                continue;
            }
            let mu = mean_acc / weight;
            let mut var_acc = 0.0;
            for (t, &tau) in trace.samples().iter().enumerate() {
                if tau == mask {
                    continue;
                }
                var_acc += comp_resp[t * m + g] * (tau - mu) * (tau - mu);
            }
            let sigma = (var_acc / weight).max(MIN_VARIANCE).sqrt();
            model.set_gaussian(g, mu, sigma);
        }
    }

    if !converged {
        let emissions = EmissionTable::build(&model, trace, bin_ms)?;
        let fb = forward_backward_with(&model, t_len, &emissions)?;
        history.push(fb.log_likelihood);
    }

    model.validate()?;
    Ok(EmFit {
        model,
        log_likelihood: history,
        converged,
    })
}

/// Options for the full training pipeline.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub n_states: usize,
    pub n_mixtures: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
    /// Number of candidate initializations scored before the full fit.
    pub restarts: usize,
    /// EM iterations spent scoring each candidate.
    pub short_iters: usize,
    /// Trace prefix length used for candidate scoring.
    pub selection_len: usize,
    pub bin_ms: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            n_states: 3,
            n_mixtures: 4,
            max_iters: 50,
            tol: 1e-8,
            seed: 0,
            restarts: 24,
            short_iters: 10,
            selection_len: 2500,
            bin_ms: DEFAULT_BIN_MS,
        }
    }
}

/// Full training pipeline: the k-means initialization plus randomized
/// restart candidates, scored by short-run likelihood on a trace prefix;
/// the winner is fit to convergence.
///
/// Mixture likelihoods are riddled with local optima when one delay cluster
/// is rare; likelihood-scored restarts recover such clusters where a single
/// k-means pass merges them into a neighbor.
pub fn train_model(trace: &DelayTrace, opts: &TrainOptions) -> Result<EmFit, SchmmError> {
    if trace.len() < 2 {
        return Err(SchmmError::EmptyTrace);
    }
    let n = opts.n_states;
    let m = opts.n_mixtures;
    let mask = trace.mask();
    let delays: Vec<f64> = trace.delays().collect();
    if delays.is_empty() {
        return Err(SchmmError::EmptyTrace);
    }
    let lo = delays.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = delays.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let gmean = delays.iter().sum::<f64>() / delays.len() as f64;
    let gstd = (delays.iter().map(|x| (x - gmean) * (x - gmean)).sum::<f64>()
        / delays.len() as f64)
        .sqrt();
    let sigma0 = (gstd / 8.0).max(1e-3);

    let mut rng = chacha(opts.seed ^ 0x7261_6e64);
    let mut candidates = Vec::with_capacity(opts.restarts.max(1));
    candidates.push(init_model(n, m, trace, mask, opts.seed)?);
    for r in 1..opts.restarts.max(1) {
        let mut mu: Vec<f64> = if r % 2 == 0 {
            (0..m - 1).map(|_| rng.gen_range(lo..=hi)).collect()
        } else {
            let mut picks = delays.clone();
            picks.shuffle(&mut rng);
            picks.truncate(m - 1);
            picks
        };
        mu.sort_by(|a, b| a.partial_cmp(b).unwrap());
        mu.push(mask);
        let mut sigma = vec![sigma0; m - 1];
        sigma.push(DIRAC_SIGMA_MS);
        let pi = vec![1.0 / n as f64; n];
        let mut trans = vec![0.0; n * n];
        for row in trans.chunks_mut(n) {
            for v in row.iter_mut() {
                *v = 1.0 + 0.05 * rng.gen::<f64>();
            }
            let sum: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let mut mix = vec![0.0; n * m];
        for row in mix.chunks_mut(m) {
            for v in row.iter_mut() {
                *v = 1.0 + 0.05 * rng.gen::<f64>();
            }
            let sum: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        candidates.push(SchmmModel::new(n, m, pi, trans, mix, mu, sigma, mask)?);
    }

    let prefix_len = opts.selection_len.min(trace.len()).max(2);
    let prefix = DelayTrace::new(trace.samples()[..prefix_len].to_vec(), mask)?;
    let mut best: Option<(f64, SchmmModel)> = None;
    for cand in candidates {
        // a candidate whose Gaussians cannot explain the prefix is discarded
        let Ok(fit) = em_fit_binned(&cand, &prefix, opts.short_iters, f64::NEG_INFINITY, opts.bin_ms)
        else {
            continue;
        };
        let score = *fit.log_likelihood.last().unwrap();
        if best.as_ref().map_or(true, |(b, _)| score > *b) {
            best = Some((score, fit.model));
        }
    }
    let (_, start) = best.ok_or_else(|| {
        SchmmError::Invalid("no training candidate could explain the trace".into())
    })?;
    em_fit_binned(&start, trace, opts.max_iters, opts.tol, opts.bin_ms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::DEFAULT_MASK_MS;
    use approx::assert_relative_eq;

    #[test]
    fn init_is_uniform_with_kmeans_gaussians() {
        let trace = DelayTrace::new(
            alloc::vec![45.0, 46.0, 55.0, 56.0, DEFAULT_MASK_MS],
            DEFAULT_MASK_MS,
        )
        .unwrap();
        let model = init_model(3, 3, &trace, DEFAULT_MASK_MS, 0).unwrap();
        for &v in model.trans() {
            assert_relative_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
        for &v in model.pi() {
            assert_relative_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
        for &v in model.mix() {
            assert_relative_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
        assert_relative_eq!(model.mu()[0], 45.5, epsilon = 1e-12);
        assert_relative_eq!(model.mu()[1], 55.5, epsilon = 1e-12);
        assert_eq!(model.mu()[2], DEFAULT_MASK_MS);
    }

    #[test]
    fn init_rejects_too_few_distinct_values() {
        let trace = DelayTrace::new(
            alloc::vec![50.0, 50.0, 50.0, DEFAULT_MASK_MS],
            DEFAULT_MASK_MS,
        )
        .unwrap();
        let err = init_model(2, 4, &trace, DEFAULT_MASK_MS, 0).unwrap_err();
        assert_eq!(
            err,
            SchmmError::TooFewDistinctDelays {
                distinct: 1,
                clusters: 3
            }
        );
    }

    #[test]
    fn single_state_em_recovers_sample_moments() {
        // one state, one Gaussian + dropout: the EM fixed point is the
        // sample mean / population deviation of the delays
        let samples = alloc::vec![48.0, 50.0, 51.0, 49.0, 52.0, 50.0];
        let trace = DelayTrace::new(samples.clone(), DEFAULT_MASK_MS).unwrap();
        let model0 = SchmmModel::new(
            1,
            2,
            alloc::vec![1.0],
            alloc::vec![1.0],
            alloc::vec![0.5, 0.5],
            alloc::vec![40.0, DEFAULT_MASK_MS],
            alloc::vec![5.0, DIRAC_SIGMA_MS],
            DEFAULT_MASK_MS,
        )
        .unwrap();
        let fit = em_fit(&model0, &trace, 100, 1e-12).unwrap();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let std = (samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
            / samples.len() as f64)
            .sqrt();
        assert_relative_eq!(fit.model.mu()[0], mean, epsilon = 1e-6);
        assert_relative_eq!(fit.model.sigma()[0], std, epsilon = 1e-6);
        // no dropouts: the dropout weight collapses to the floor
        assert!(fit.model.mix_at(0, 1) < 1e-5);
    }

    #[test]
    fn em_rejects_too_short_traces() {
        let trace = DelayTrace::new(alloc::vec![50.0], DEFAULT_MASK_MS).unwrap();
        let model = SchmmModel::new(
            1,
            2,
            alloc::vec![1.0],
            alloc::vec![1.0],
            alloc::vec![0.9, 0.1],
            alloc::vec![50.0, DEFAULT_MASK_MS],
            alloc::vec![2.0, DIRAC_SIGMA_MS],
            DEFAULT_MASK_MS,
        )
        .unwrap();
        assert_eq!(em_fit(&model, &trace, 10, 1e-8).unwrap_err(), SchmmError::EmptyTrace);
        assert!(train_model(&trace, &TrainOptions::default()).is_err());
    }

    #[test]
    fn em_loglik_never_decreases() {
        let trace = DelayTrace::new(
            alloc::vec![
                44.0,
                46.0,
                45.0,
                80.0,
                81.0,
                DEFAULT_MASK_MS,
                79.0,
                45.5,
                80.5,
                DEFAULT_MASK_MS,
                46.5,
                79.5
            ],
            DEFAULT_MASK_MS,
        )
        .unwrap();
        let model0 = init_model(2, 3, &trace, DEFAULT_MASK_MS, 3).unwrap();
        let fit = em_fit(&model0, &trace, 40, 0.0).unwrap();
        for w in fit.log_likelihood.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "loglik decreased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn trained_model_separates_two_clusters() {
        let trace = {
            let mut rng = chacha(11);
            let mut samples = Vec::new();
            for i in 0..400 {
                let mu = if i % 2 == 0 { 40.0 } else { 80.0 };
                samples.push(mu + crate::rng::standard_normal(&mut rng));
            }
            DelayTrace::new(samples, DEFAULT_MASK_MS).unwrap()
        };
        let fit = train_model(
            &trace,
            &TrainOptions {
                n_states: 2,
                n_mixtures: 3,
                restarts: 8,
                ..TrainOptions::default()
            },
        )
        .unwrap();
        let mut mu = fit.model.mu()[..2].to_vec();
        mu.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((mu[0] - 40.0).abs() < 2.0, "mu {mu:?}");
        assert!((mu[1] - 80.0).abs() < 4.0, "mu {mu:?}");
    }
}
