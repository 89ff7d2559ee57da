//! Solver toolkit for optimization problems with quasi-variational
//! inequality constraints (OPQVI).
//!
//! The toolkit reformulates the QVI constraint through the optimal value
//! function of the inner problem, assembles the resulting square semismooth
//! stationarity system `Phi` together with its smooth merit function, and
//! solves it with a globalized semismooth Newton method. On top of the
//! solver it provides:
//!
//! * regularity diagnostics (LICQ, strict complementarity, second-order
//!   sufficiency on the critical subspace) at candidate solutions,
//! * stability analysis of the inner solution map (value function, multiplier
//!   cones, a Lipschitz-modulus estimate),
//! * a small library of benchmark problems plus a seeded generator for a
//!   discretized bilevel optimal-control family,
//! * a CLI/benchmark front end that writes CSV/Markdown/JSON tables.
//!
//! Everything is dense: the target systems stay below a few thousand
//! unknowns, where dense LU factorizations are both fast and simple.

// `!(x > 0.0)` rejects NaN configuration values; `x <= 0.0` would not.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::type_complexity)]

pub mod bench;
pub mod diagnostics;
pub mod fd;
pub mod jacobian;
pub mod library;
pub mod lp;
pub mod problem;
pub mod residual;
pub mod solver;
pub mod stability;

pub use diagnostics::{cd_regularity_report, kkt_residual, RegularityReport, Verdict};
pub use jacobian::{assemble_w, classify, merit_gradient, pair_coeff, DegenRule, IndexPartition};
pub use library::{builtin_registry, ProblemEntry, Registry};
pub use problem::{Dims, Iterate, ProblemDef};
pub use residual::{grad_l, merit, phi_c, residual};
pub use solver::{default_start, lambda_sweep, solve, SolveReport, SolverConfig, Status};
pub use stability::{value_function, StabilityError};

/// Crate-wide error type for evaluation and shape failures.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("non-finite value while evaluating {block}")]
    NonFinite { block: &'static str },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown problem `{0}`")]
    UnknownProblem(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
