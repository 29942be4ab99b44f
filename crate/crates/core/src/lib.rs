//! Symbolic out-of-context reasoning in one-layer linear attention.
//!
//! The crate builds a synthetic fact/implication task, trains one-layer
//! linear-attention models on it in two parameterizations (factorized
//! `W_O W_V^T` and a merged `W_OV`), and evaluates both against closed-form
//! max-margin solutions of the corresponding nuclear-norm and Frobenius-norm
//! minimization problems.
//!
//! Module map:
//! - [`numerics`]: dense matrices, Jacobi SVD, norms, restricted softmax.
//! - [`task`]: task sizes, token numbering, dataset construction.
//! - [`model`]: parameterizations, logits, checkpoints.
//! - [`training`]: losses, analytic gradients, the training loop, metrics.
//! - [`theory`]: closed-form margin solutions, block SVD, numeric baselines.

pub mod error;
pub mod model;
pub mod numerics;
pub mod task;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
pub use model::{
    combine, factorize, factorize_with_tol, load_checkpoint, logits_fixed_attention, logits_full,
    predict_prob, reduced_ov, save_checkpoint, AttentionMode, FactorizedParams, ModelParams,
    NonFactorizedParams, ReducedOV,
};
pub use numerics::{nuclear_norm, softmax_over_subset, svd, DenseMatrix, Svd};
pub use task::{build_dataset, build_task, encode_sequence, Block, Dataset, Record, TaskSpec, Triple};
pub use theory::{
    assemble_block_matrix, block_svd, check_feasibility, direction_similarity, frobenius_solution,
    min_frobenius_norm, min_nuclear_norm, normalize_to_unit_margin, nuclear_solution,
    numeric_max_margin, test_margins, theory_cell, theory_report, BlockCoefficients,
    GramCoefficients, NormKind, SpectralSummary, TestMargins, TheoryCell, Violation,
};
pub use training::{
    grad_factorized, grad_nonfactorized, init_params, margin, mean_rank, min_test_margin,
    parse_metrics_csv, run_manifest, symmetry_residual, test_loss, train, train_loss,
    FactorizedGrad, Init, MetricsRow, NonFactorizedGrad, Optimizer, Parameterization, TrainConfig,
    TrainLog, METRICS_HEADER,
};
