//! Consensus-constrained finite-sum problem abstraction shared by all
//! algorithms and objectives.
//!
//! The finite-sum objective `min (1/n) sum_i f_i(phi_i, lambda)` is restated
//! with per-sample copies `lambda_i` of the global variable and the consensus
//! constraint `lambda_i = lambda_0`.

use std::sync::Arc;

use ndarray::{Array1, ArrayView1};

use crate::error::{CoreError, Result};
use crate::subsolver::{InnerSolverConfig, LocalSolution};

/// Contiguous, ordered, non-overlapping partition of the global variable into
/// `B` blocks of dimensions `d_1..d_B`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPartition {
    block_dims: Vec<usize>,
    offsets: Vec<usize>,
    total: usize,
}

impl BlockPartition {
    pub fn new(block_dims: Vec<usize>) -> Result<Self> {
        if block_dims.is_empty() || block_dims.iter().any(|&d| d == 0) {
            return Err(CoreError::InvalidConfig(
                "block partition requires at least one block, all dims >= 1".into(),
            ));
        }
        let mut offsets = Vec::with_capacity(block_dims.len());
        let mut total = 0;
        for &d in &block_dims {
            offsets.push(total);
            total += d;
        }
        Ok(Self {
            block_dims,
            offsets,
            total,
        })
    }

    /// Single block covering the whole global variable.
    pub fn single(total: usize) -> Result<Self> {
        Self::new(vec![total])
    }

    pub fn num_blocks(&self) -> usize {
        self.block_dims.len()
    }

    pub fn total_dim(&self) -> usize {
        self.total
    }

    pub fn block_dims(&self) -> &[usize] {
        &self.block_dims
    }

    /// Half-open coordinate range `[start, end)` of block `j`.
    pub fn block_range(&self, j: usize) -> std::ops::Range<usize> {
        let start = self.offsets[j];
        start..start + self.block_dims[j]
    }

    /// Block index owning global coordinate `idx`.
    pub fn block_of(&self, idx: usize) -> usize {
        debug_assert!(idx < self.total);
        match self.offsets.binary_search(&idx) {
            Ok(j) => j,
            Err(j) => j - 1,
        }
    }
}

/// Block step sizes `eta_1..eta_B` defining the preconditioner
/// `D_eta = blkdiag(1/eta_j * I)`. Uniform etas recover the unpreconditioned
/// penalty `1/(2 eta) ||lambda_i - lambda_0||^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct PreconditionerSpec {
    etas: Vec<f64>,
}

impl PreconditionerSpec {
    pub fn new(etas: Vec<f64>) -> Result<Self> {
        if etas.is_empty() || etas.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
            return Err(CoreError::InvalidConfig(
                "preconditioner requires all etas > 0 and finite".into(),
            ));
        }
        Ok(Self { etas })
    }

    pub fn uniform(eta: f64, num_blocks: usize) -> Result<Self> {
        Self::new(vec![eta; num_blocks])
    }

    pub fn etas(&self) -> &[f64] {
        &self.etas
    }

    pub fn num_blocks(&self) -> usize {
        self.etas.len()
    }

    pub fn validate(&self, partition: &BlockPartition) -> Result<()> {
        if self.etas.len() != partition.num_blocks() {
            return Err(CoreError::DimensionMismatch {
                field: "preconditioner etas",
                expected: partition.num_blocks(),
                got: self.etas.len(),
            });
        }
        Ok(())
    }

    /// Per-coordinate diagonal of `D_eta`, i.e. `1/eta_j` repeated `d_j` times.
    pub fn coordinate_inv_etas(&self, partition: &BlockPartition) -> Array1<f64> {
        let mut out = Array1::zeros(partition.total_dim());
        for (j, &eta) in self.etas.iter().enumerate() {
            for idx in partition.block_range(j) {
                out[idx] = 1.0 / eta;
            }
        }
        out
    }

    /// Applies `D_eta` to a vector: `out = D_eta v`.
    pub fn apply(&self, partition: &BlockPartition, v: &ArrayView1<f64>) -> Array1<f64> {
        let mut out = v.to_owned();
        for (j, &eta) in self.etas.iter().enumerate() {
            for idx in partition.block_range(j) {
                out[idx] /= eta;
            }
        }
        out
    }
}

/// Lipschitz information an objective can report for step-size selection.
#[derive(Debug, Clone)]
pub struct LipschitzEstimates {
    /// Smoothness bound for the local (phi) block.
    pub l_phi: f64,
    /// Per-global-block smoothness bounds `L_1..L_B`, aligned with the partition.
    pub l_lambda_blocks: Vec<f64>,
}

/// Which block a coordinate-descent step targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockTarget {
    Phi,
    Lambda(usize),
}

/// Per-sample objective interface. `eval` and both gradients must be pure
/// functions of `(i, phi_i, lambda)`.
pub trait ObjectiveOracle: Send + Sync {
    fn n_samples(&self) -> usize;

    /// Local (per-sample) dimension; 0 means no local variables.
    fn local_dim(&self) -> usize;

    fn partition(&self) -> &BlockPartition;

    /// Evaluates `f_i(phi_i, lambda)`.
    fn eval(&self, i: usize, phi: ArrayView1<f64>, lambda: ArrayView1<f64>) -> Result<f64>;

    fn grad_phi(&self, i: usize, phi: ArrayView1<f64>, lambda: ArrayView1<f64>)
        -> Result<Array1<f64>>;

    fn grad_lambda(
        &self,
        i: usize,
        phi: ArrayView1<f64>,
        lambda: ArrayView1<f64>,
    ) -> Result<Array1<f64>>;

    /// Minimizes `f_i` over the local block at fixed `lambda`. Used when a
    /// trace point or baseline step needs locally re-optimized phi.
    fn optimize_phi(&self, i: usize, lambda: ArrayView1<f64>) -> Result<Array1<f64>>;

    /// Block-wise smoothness bounds, if the objective supports them.
    fn lipschitz_estimates(&self) -> Option<LipschitzEstimates> {
        None
    }

    /// Exact single-block minimizer of the local augmented Lagrangian holding
    /// all other blocks fixed, when available in closed form. Returns the new
    /// value of the targeted block only.
    #[allow(clippy::too_many_arguments)]
    fn exact_block_min(
        &self,
        _i: usize,
        _target: BlockTarget,
        _phi: ArrayView1<f64>,
        _lambda: ArrayView1<f64>,
        _mu: ArrayView1<f64>,
        _lambda0: ArrayView1<f64>,
        _precond: &PreconditionerSpec,
    ) -> Result<Option<Array1<f64>>> {
        Ok(None)
    }

    /// Solves the local augmented-Lagrangian subproblem
    /// `argmin_{phi,lambda} f_i + <mu, lambda - lambda0> + 1/2 ||lambda - lambda0||^2_{D_eta}`.
    /// The default routes to the iterative sub-solver; objectives with a
    /// closed form override this.
    fn solve_local_al(
        &self,
        i: usize,
        mu: ArrayView1<f64>,
        lambda0: ArrayView1<f64>,
        precond: &PreconditionerSpec,
        init_phi: ArrayView1<f64>,
        init_lambda: ArrayView1<f64>,
        config: &InnerSolverConfig,
    ) -> Result<LocalSolution>
    where
        Self: Sized,
    {
        crate::subsolver::solve_local_al(self, i, mu, lambda0, precond, init_phi, init_lambda, config)
    }

    /// One natural-gradient (SVI-style) global update blended with step `rho`,
    /// estimated from the given batch with `n/m` rescaling. Returns `None` when
    /// the objective has no conjugate closed form.
    fn svi_natural_update(
        &self,
        _phis: &[Array1<f64>],
        _lambda: &Array1<f64>,
        _batch: &[usize],
        _rho: f64,
    ) -> Option<Array1<f64>> {
        None
    }
}

/// The finite-sum consensus instance: sample count, dimensions, block
/// partition, and the per-sample objective oracle.
#[derive(Clone)]
pub struct ConsensusProblem<O: ObjectiveOracle> {
    oracle: Arc<O>,
}

impl<O: ObjectiveOracle> ConsensusProblem<O> {
    pub fn new(oracle: O) -> Result<Self> {
        if oracle.n_samples() == 0 {
            return Err(CoreError::InvalidConfig("n must be >= 1".into()));
        }
        if oracle.partition().total_dim() == 0 {
            return Err(CoreError::InvalidConfig("global dimension must be >= 1".into()));
        }
        Ok(Self {
            oracle: Arc::new(oracle),
        })
    }

    pub fn oracle(&self) -> &O {
        &self.oracle
    }

    pub fn n(&self) -> usize {
        self.oracle.n_samples()
    }

    pub fn local_dim(&self) -> usize {
        self.oracle.local_dim()
    }

    pub fn global_dim(&self) -> usize {
        self.oracle.partition().total_dim()
    }

    pub fn partition(&self) -> &BlockPartition {
        self.oracle.partition()
    }

    pub fn check_index(&self, i: usize) -> Result<()> {
        if i >= self.n() {
            return Err(CoreError::IndexOutOfRange { index: i, n: self.n() });
        }
        Ok(())
    }
}

/// Global iterate, per-sample records, drift accumulator, and iteration counter.
#[derive(Debug, Clone)]
pub struct SolverState {
    pub lambda0: Array1<f64>,
    pub phi: Vec<Array1<f64>>,
    pub lambda: Vec<Array1<f64>>,
    pub mu: Vec<Array1<f64>>,
    pub h: Array1<f64>,
    pub t: usize,
}

impl SolverState {
    /// Initializes `lambda_i = lambda0`, `mu_i = 0`, `h = 0` for all samples,
    /// with the local variables set to `init_phi` (zeros when absent).
    pub fn new<O: ObjectiveOracle>(
        problem: &ConsensusProblem<O>,
        lambda0: Array1<f64>,
        init_phi: Option<&[Array1<f64>]>,
    ) -> Result<Self> {
        let d_lambda = problem.global_dim();
        if lambda0.len() != d_lambda {
            return Err(CoreError::DimensionMismatch {
                field: "lambda0",
                expected: d_lambda,
                got: lambda0.len(),
            });
        }
        let n = problem.n();
        let d_phi = problem.local_dim();
        let phi = match init_phi {
            Some(ps) => {
                if ps.len() != n {
                    return Err(CoreError::DimensionMismatch {
                        field: "init_phi",
                        expected: n,
                        got: ps.len(),
                    });
                }
                for p in ps {
                    if p.len() != d_phi {
                        return Err(CoreError::DimensionMismatch {
                            field: "init_phi entry",
                            expected: d_phi,
                            got: p.len(),
                        });
                    }
                }
                ps.to_vec()
            }
            None => vec![Array1::zeros(d_phi); n],
        };
        Ok(Self {
            lambda: vec![lambda0.clone(); n],
            mu: vec![Array1::zeros(d_lambda); n],
            h: Array1::zeros(d_lambda),
            phi,
            lambda0,
            t: 0,
        })
    }

    pub fn n(&self) -> usize {
        self.lambda.len()
    }

    /// Asserts dimensional consistency across all stored vectors.
    pub fn check_consistent(&self, d_phi: usize, d_lambda: usize) -> Result<()> {
        if self.lambda0.len() != d_lambda || self.h.len() != d_lambda {
            return Err(CoreError::DimensionMismatch {
                field: "state global vectors",
                expected: d_lambda,
                got: self.lambda0.len(),
            });
        }
        for i in 0..self.n() {
            if self.phi[i].len() != d_phi {
                return Err(CoreError::DimensionMismatch {
                    field: "state.phi",
                    expected: d_phi,
                    got: self.phi[i].len(),
                });
            }
            if self.lambda[i].len() != d_lambda || self.mu[i].len() != d_lambda {
                return Err(CoreError::DimensionMismatch {
                    field: "state.lambda/mu",
                    expected: d_lambda,
                    got: self.lambda[i].len(),
                });
            }
        }
        Ok(())
    }
}

/// `(1/n) sum_i f_i(phi_i, lambda0)` evaluated at the common global iterate.
pub fn full_objective<O: ObjectiveOracle>(
    problem: &ConsensusProblem<O>,
    state: &SolverState,
) -> Result<f64> {
    let n = problem.n();
    let mut total = 0.0;
    for i in 0..n {
        total += problem
            .oracle()
            .eval(i, state.phi[i].view(), state.lambda0.view())?;
    }
    Ok(total / n as f64)
}

/// `max_i ||lambda_i - lambda0||_2`, the consensus-constraint violation.
pub fn consensus_residual(state: &SolverState) -> f64 {
    let mut worst: f64 = 0.0;
    for li in &state.lambda {
        let diff = li - &state.lambda0;
        worst = worst.max(diff.dot(&diff).sqrt());
    }
    worst
}
