//! Synthetic trace generation from a model (stands in for collecting raw
//! network measurements).

use alloc::vec::Vec;

use crate::rng::{categorical, chacha, standard_normal};

use super::model::{DelayTrace, SchmmError, SchmmModel};

/// Sample `length` delays by walking the hidden chain and drawing from the
/// selected codebook component; the dropout component emits the mask.
/// Deterministic for a given seed.
pub fn sample_trace(
    model: &SchmmModel,
    length: usize,
    rng_seed: u64,
) -> Result<DelayTrace, SchmmError> {
    model.validate()?;
    let mut rng = chacha(rng_seed);
    let mut samples = Vec::with_capacity(length);
    let mut state = categorical(&mut rng, model.pi());
    for _ in 0..length {
        let g = categorical(&mut rng, model.mix_row(state));
        if g == model.n_mixtures() - 1 {
            samples.push(model.mask());
        } else {
            let raw = model.mu()[g] + model.sigma()[g] * standard_normal(&mut rng);
            // keep samples inside the valid delay range
            samples.push(raw.clamp(f64::MIN_POSITIVE, model.mask() * 0.5));
        }
        state = categorical(&mut rng, model.trans_row(state));
    }
    DelayTrace::new(samples, model.mask())
}

/// Stateful per-link sampler used by the channel: one hidden chain advanced
/// one packet at a time.
#[derive(Debug, Clone)]
pub struct TraceSampler {
    model: SchmmModel,
    rng: rand_chacha::ChaCha8Rng,
    state: usize,
}

impl TraceSampler {
    pub fn new(model: SchmmModel, rng_seed: u64) -> Self {
        let mut rng = chacha(rng_seed);
        let state = categorical(&mut rng, model.pi());
        TraceSampler { model, rng, state }
    }

    /// Draw the next delay (the mask encodes a dropout).
    pub fn next_delay(&mut self) -> f64 {
        let g = categorical(&mut self.rng, self.model.mix_row(self.state));
        let tau = if g == self.model.n_mixtures() - 1 {
            self.model.mask()
        } else {
            let raw = self.model.mu()[g]
                + self.model.sigma()[g] * standard_normal(&mut self.rng);
            raw.clamp(f64::MIN_POSITIVE, self.model.mask() * 0.5)
        };
        self.state = categorical(&mut self.rng, self.model.trans_row(self.state));
        tau
    }

    pub fn mask(&self) -> f64 {
        self.model.mask()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schmm::model::DIRAC_SIGMA_MS;
    use crate::DEFAULT_MASK_MS;

    #[test]
    fn pure_dropout_model_emits_only_the_mask() {
        let model = SchmmModel::new(
            2,
            2,
            alloc::vec![0.5, 0.5],
            alloc::vec![0.5, 0.5, 0.5, 0.5],
            alloc::vec![0.0, 1.0, 0.0, 1.0],
            alloc::vec![50.0, DEFAULT_MASK_MS],
            alloc::vec![2.0, DIRAC_SIGMA_MS],
            DEFAULT_MASK_MS,
        )
        .unwrap();
        let trace = sample_trace(&model, 50, 3).unwrap();
        assert!(trace.samples().iter().all(|&v| v == DEFAULT_MASK_MS));
    }

    #[test]
    fn tight_gaussian_concentrates_on_its_mean() {
        let model = SchmmModel::new(
            1,
            2,
            alloc::vec![1.0],
            alloc::vec![1.0],
            alloc::vec![1.0, 0.0],
            alloc::vec![50.0, DEFAULT_MASK_MS],
            alloc::vec![1e-9, DIRAC_SIGMA_MS],
            DEFAULT_MASK_MS,
        )
        .unwrap();
        let trace = sample_trace(&model, 100, 4).unwrap();
        assert!(trace.samples().iter().all(|&v| (v - 50.0).abs() < 1e-6));
    }

    #[test]
    fn same_seed_same_trace() {
        let model = SchmmModel::new(
            1,
            2,
            alloc::vec![1.0],
            alloc::vec![1.0],
            alloc::vec![0.8, 0.2],
            alloc::vec![50.0, DEFAULT_MASK_MS],
            alloc::vec![2.0, DIRAC_SIGMA_MS],
            DEFAULT_MASK_MS,
        )
        .unwrap();
        let a = sample_trace(&model, 200, 9).unwrap();
        let b = sample_trace(&model, 200, 9).unwrap();
        assert_eq!(a, b);
    }
}
