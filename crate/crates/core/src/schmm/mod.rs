//! Semi-continuous hidden Markov model of per-link delay and dropout
//! processes: representation, likelihood evaluation, offline EM training,
//! streaming updates and next-delay prediction.

mod forward;
mod model;
mod online;
pub(crate) mod sample;
mod train;

pub use forward::{forward_backward, ForwardBackward};
pub use model::{
    DelayTrace, EmissionWeight, FilterState, SchmmError, SchmmModel, DIRAC_SIGMA_MS,
    MIN_VARIANCE, PROB_TOL, WEIGHT_FLOOR,
};
pub use online::{
    estimate_prev_delay, filter_update, incremental_em_update, incremental_em_update_binned,
    predict_from_state, viterbi_predict, DelayPrediction, UpdateOutcome,
};
pub use sample::{sample_trace, TraceSampler};
pub use train::{em_fit, em_fit_binned, init_model, kmeans_1d, train_model, EmFit, TrainOptions};
