//! # ucb-core
//!
//! Training and evaluation of Bayesian neural networks by backprop, with
//! uncertainty-guided continual learning on task sequences.
//!
//! The crate is organized bottom-up:
//!
//! - [`variational`]: Gaussian `(mu, rho)` parameter blocks, the scale-mixture
//!   prior, and the per-minibatch ELBO.
//! - [`network`]: multi-layer perceptrons whose weights are variational blocks,
//!   MC-sampled forward passes, prediction, and the checkpoint format.
//! - [`grad`]: closed-form reverse-mode gradients for the ELBO and a
//!   finite-difference checker for them.
//! - [`optim`]: per-parameter SGD, uncertainty-scaled learning rates, and
//!   signal-to-noise pruning with persisted freeze maps.
//! - [`data`]: IDX loading, class splits, pixel permutations, and synthetic
//!   blob task sequences.
//! - [`metrics`]: the task accuracy matrix, backward transfer, and run
//!   artifact files.
//! - [`harness`]: the continual training loop over a task sequence, and
//!   hyperparameter search for the prior.

// Array types appear throughout the public API; re-export the crate so
// downstream users stay version-consistent.
pub use ndarray;

pub mod data;
pub mod error;
pub mod grad;
pub mod harness;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod variational;

pub use data::{
    apply_permutation, invert_permutation, load_idx_images, load_idx_labels, load_idx_pair,
    make_permuted_tasks, make_synthetic_blobs, mix_seed, split_by_classes, task_permutation,
    Dataset, SequenceKind, SyntheticSpec, TaskData, TaskSequence,
};
pub use error::{Result, UcbError};
pub use grad::{
    backward, elbo_terms_from_trace, finite_diff_check, gradcheck_toy, masked_loss, BlockGrads,
    BlockKind, FdGroup, FdReport, FdSettings, GradientSet, TermMask,
};
pub use harness::{
    default_prior_grid, generalized_accuracy, matched_hidden_dims, run_sequence,
    tune_hyperparams, HeadMode, Mode, PruneReport, RunOutput, TaskStats, TrainConfig, TuneResult,
};
pub use metrics::{
    accuracy_percent, bwt_acc, read_metrics_json, read_rmatrix_csv, write_metrics_json,
    write_rmatrix_csv, RMatrix, RunMetrics,
};
pub use network::{
    log_likelihood, log_softmax_rows, nll_mean, relu, read_checkpoint, softmax_rows,
    write_checkpoint, BayesLinearLayer, BayesNetwork, ForwardTrace, HeadLayout, HeadScope,
    HeadSpec, InitConfig, LayerEps, LayerMaskValues, LayerSample, LayerSigmas, NetEps, NetMask,
    NetworkSpec, PredictMode, RawLayer, SampleTrace,
};
pub use optim::{
    apply_prune, candidate_mask, freeze_count_for, layer_snr, mask_through, plan_prune,
    read_freeze_map, select_prune_ratio, select_top_snr, sgd_step, ucb_lr_update,
    write_freeze_map, FreezeMap, ImportanceConfig, LayerPlan, LrBlock, OmegaKind, PerParamLR,
    PrunePlan, PRUNE_RATIO_CANDIDATES,
};
pub use variational::{
    elbo_loss, gaussian_log_pdf, log_posterior, log_prior_mixture, sample_weights, sigmoid,
    softplus, softplus_sigma, ElboTerms, GaussianVariational, ParamShape, ScaleMixturePrior,
    WeightSample,
};
