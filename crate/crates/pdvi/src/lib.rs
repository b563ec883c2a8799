//! Consensus-constrained mini-batch primal-dual optimization for mean-field
//! variational inference.
//!
//! The crate reformulates a finite-sum objective `min (1/n) sum_i f_i(phi_i, lambda)`
//! as a consensus-constrained problem with per-sample copies `lambda_i = lambda_0`
//! and solves it with augmented-Lagrangian primal-dual iterations (PD-VI) or the
//! block-preconditioned variant (P2D-VI). Three concrete objectives are provided:
//! a strongly convex quadratic, a mean-field Gaussian-mixture negative ELBO, and a
//! Potts-augmented spatial clustering ELBO with patch decomposition.

pub mod baselines;
pub mod consensus;
pub mod data;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod objectives;
pub mod solver;
pub mod subsolver;

pub use consensus::{
    consensus_residual, full_objective, BlockPartition, ConsensusProblem, ObjectiveOracle,
    PreconditionerSpec, SolverState,
};
pub use error::{CoreError, Result};
pub use solver::{run, BatchSchedule, SolveConfig, TraceRecord};
