//! Supervised image segmentation by convex marginal-MAP estimation of a
//! hidden field under a structure tensor prior.
//!
//! A `K x n` hidden field `z` is fitted to per-pixel class likelihoods by
//! minimizing
//!
//! ```text
//! sum_i -ln(p_i^T z_i) + lambda * sum_i ||[J z]_i||_{S_p}
//! subject to z >= 0, 1^T z_i = 1
//! ```
//!
//! where `[J z]_i` is the patch-based Jacobian of the field at pixel `i`.
//! The problem is split into four terms and solved with an ADMM scheme whose
//! quadratic step is diagonal in the Fourier domain; see [`solver`].

pub mod error;
pub mod field;
pub mod hsio;
pub mod mlr;
pub mod operators;
pub mod prox;
pub mod solver;
pub mod synth;

pub use error::{Error, Result};
pub use field::{
    build_patch_config, default_gamma, HiddenField, HyperCube, ImageGrid, LabelMap, PatchConfig,
    ProbabilityMap,
};
pub use mlr::{predict_probs, train_mlr, MlrModel, TrainOptions, TrainingSet};
pub use operators::{
    apply_jacobian, apply_jacobian_adjoint, build_fourier_symbol, solve_quadratic, FourierSymbol,
    StackedJacobian,
};
pub use prox::SchattenOrder;
pub use solver::{extract_labels, objective, run, SolveReport, Solver, SolverConfig};
