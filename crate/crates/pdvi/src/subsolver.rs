//! Per-sample augmented-Lagrangian subproblem solver.
//!
//! Minimizes `f_i(phi, lambda) + <mu, lambda - lambda0> + 1/2 ||lambda - lambda0||^2_{D_eta}`
//! over `(phi, lambda)` to a stationarity tolerance. Quadratic oracles override
//! this with an exact linear solve; the iterative paths here serve the
//! variational objectives.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::consensus::{BlockTarget, ObjectiveOracle, PreconditionerSpec};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerMethod {
    ClosedForm,
    BlockCoordinateDescent,
    GradientDescent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineSearch {
    FixedStep { step: f64 },
    Backtracking,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct InnerSolverConfig {
    pub method: InnerMethod,
    /// Stationarity norm both gradient blocks must reach.
    pub inner_tol: f64,
    /// A full block sweep counts as one inner iteration.
    pub max_inner_iters: usize,
    pub line_search: LineSearch,
}

impl Default for InnerSolverConfig {
    fn default() -> Self {
        Self {
            method: InnerMethod::BlockCoordinateDescent,
            inner_tol: 1e-6,
            max_inner_iters: 200,
            line_search: LineSearch::Backtracking,
        }
    }
}

impl InnerSolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_tol > 0.0) {
            return Err(CoreError::InvalidConfig("inner_tol must be > 0".into()));
        }
        if self.max_inner_iters == 0 {
            return Err(CoreError::InvalidConfig("max_inner_iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// Iterations used and final stationarity norms of a local solve.
#[derive(Debug, Clone, Copy)]
pub struct InnerReport {
    pub iters: usize,
    pub grad_phi_norm: f64,
    pub grad_lambda_norm: f64,
    /// False when the iteration budget ran out above tolerance (soft failure;
    /// the outer solver decides whether to accept the best iterate).
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct LocalSolution {
    pub phi: Array1<f64>,
    pub lambda: Array1<f64>,
    pub report: InnerReport,
}

fn norm2(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

/// Value of the block-preconditioned augmented Lagrangian for sample `i`.
pub fn al_value<O: ObjectiveOracle + ?Sized>(
    oracle: &O,
    i: usize,
    phi: ArrayView1<f64>,
    lambda: ArrayView1<f64>,
    mu: ArrayView1<f64>,
    lambda0: ArrayView1<f64>,
    precond: &PreconditionerSpec,
) -> Result<f64> {
    let f = oracle.eval(i, phi, lambda)?;
    let diff = &lambda.to_owned() - &lambda0;
    let d_diff = precond.apply(oracle.partition(), &diff.view());
    Ok(f + mu.dot(&diff) + 0.5 * diff.dot(&d_diff))
}

/// Gradients of the augmented Lagrangian: `(grad_phi f, grad_lambda f + mu + D_eta (lambda - lambda0))`.
pub fn al_grads<O: ObjectiveOracle + ?Sized>(
    oracle: &O,
    i: usize,
    phi: ArrayView1<f64>,
    lambda: ArrayView1<f64>,
    mu: ArrayView1<f64>,
    lambda0: ArrayView1<f64>,
    precond: &PreconditionerSpec,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let gp = oracle.grad_phi(i, phi, lambda)?;
    let mut gl = oracle.grad_lambda(i, phi, lambda)?;
    let diff = &lambda.to_owned() - &lambda0;
    let d_diff = precond.apply(oracle.partition(), &diff.view());
    gl += &mu.to_owned();
    gl += &d_diff;
    Ok((gp, gl))
}

/// Backtracking step along `-grad` applied to the selected coordinates of the
/// joint point. `apply` writes the candidate; `value` evaluates the AL there.
/// Returns the accepted candidate (never worse than the current value).
fn backtrack_step<F>(
    current_value: f64,
    grad_sq: f64,
    line_search: LineSearch,
    mut candidate_value: F,
) -> Result<Option<(f64, f64)>>
where
    F: FnMut(f64) -> Result<f64>,
{
    if grad_sq == 0.0 {
        return Ok(None);
    }
    let mut step = match line_search {
        LineSearch::FixedStep { step } => step,
        LineSearch::Backtracking => 1.0,
    };
    let c = 1e-4;
    for _ in 0..60 {
        let v = candidate_value(step)?;
        if v.is_finite() && v <= current_value - c * step * grad_sq {
            return Ok(Some((step, v)));
        }
        if matches!(line_search, LineSearch::FixedStep { .. }) {
            // fixed step failed; fall back to shrinking anyway
        }
        step *= 0.5;
    }
    Ok(None)
}

/// One coordinate-descent sweep over the given block order. Each block is
/// updated by the oracle's exact minimizer when available, otherwise by a
/// line-searched gradient step. The AL value never increases.
#[allow(clippy::too_many_arguments)]
pub fn coordinate_descent_step<O: ObjectiveOracle + ?Sized>(
    oracle: &O,
    i: usize,
    phi: &mut Array1<f64>,
    lambda: &mut Array1<f64>,
    mu: ArrayView1<f64>,
    lambda0: ArrayView1<f64>,
    precond: &PreconditionerSpec,
    block_order: &[BlockTarget],
    line_search: LineSearch,
) -> Result<f64> {
    let partition = oracle.partition();
    let mut value = al_value(oracle, i, phi.view(), lambda.view(), mu, lambda0, precond)?;
    for &target in block_order {
        if let BlockTarget::Phi = target {
            if phi.is_empty() {
                continue;
            }
        }
        if let Some(new_block) =
            oracle.exact_block_min(i, target, phi.view(), lambda.view(), mu, lambda0, precond)?
        {
            let mut cand_phi = phi.clone();
            let mut cand_lambda = lambda.clone();
            match target {
                BlockTarget::Phi => cand_phi.assign(&new_block),
                BlockTarget::Lambda(j) => {
                    let range = partition.block_range(j);
                    cand_lambda.slice_mut(ndarray::s![range]).assign(&new_block);
                }
            }
            let cand_value = al_value(
                oracle,
                i,
                cand_phi.view(),
                cand_lambda.view(),
                mu,
                lambda0,
                precond,
            )?;
            if cand_value <= value + 1e-12 {
                *phi = cand_phi;
                *lambda = cand_lambda;
                value = cand_value;
            }
            continue;
        }
        // gradient step on the block with backtracking
        let (gp, gl) = al_grads(oracle, i, phi.view(), lambda.view(), mu, lambda0, precond)?;
        match target {
            BlockTarget::Phi => {
                let grad_sq = gp.dot(&gp);
                let base_phi = phi.clone();
                let accepted = backtrack_step(value, grad_sq, line_search, |step| {
                    let cand = &base_phi - &(step * &gp);
                    al_value(oracle, i, cand.view(), lambda.view(), mu, lambda0, precond)
                })?;
                if let Some((step, v)) = accepted {
                    *phi = &base_phi - &(step * &gp);
                    value = v;
                }
            }
            BlockTarget::Lambda(j) => {
                let range = partition.block_range(j);
                let gb = gl.slice(ndarray::s![range.clone()]).to_owned();
                let grad_sq = gb.dot(&gb);
                let base_lambda = lambda.clone();
                let accepted = backtrack_step(value, grad_sq, line_search, |step| {
                    let mut cand = base_lambda.clone();
                    {
                        let mut slice = cand.slice_mut(ndarray::s![range.clone()]);
                        slice.scaled_add(-step, &gb);
                    }
                    al_value(oracle, i, phi.view(), cand.view(), mu, lambda0, precond)
                })?;
                if let Some((step, v)) = accepted {
                    let mut slice = lambda.slice_mut(ndarray::s![range]);
                    slice.scaled_add(-step, &gb);
                    value = v;
                }
            }
        }
    }
    if !value.is_finite() {
        return Err(CoreError::InnerDiverged { sample: i });
    }
    Ok(value)
}

/// Iterative local AL solve (coordinate descent or joint gradient descent).
#[allow(clippy::too_many_arguments)]
pub fn solve_local_al<O: ObjectiveOracle + ?Sized>(
    oracle: &O,
    i: usize,
    mu: ArrayView1<f64>,
    lambda0: ArrayView1<f64>,
    precond: &PreconditionerSpec,
    init_phi: ArrayView1<f64>,
    init_lambda: ArrayView1<f64>,
    config: &InnerSolverConfig,
) -> Result<LocalSolution> {
    config.validate()?;
    precond.validate(oracle.partition())?;
    if init_phi.iter().any(|x| !x.is_finite()) || init_lambda.iter().any(|x| !x.is_finite()) {
        return Err(CoreError::NonFinite { field: "inner init" });
    }
    let mut phi = init_phi.to_owned();
    let mut lambda = init_lambda.to_owned();
    let partition = oracle.partition();

    // default block order: phi first, then lambda blocks in index order
    let mut order: Vec<BlockTarget> = Vec::with_capacity(1 + partition.num_blocks());
    order.push(BlockTarget::Phi);
    for j in 0..partition.num_blocks() {
        order.push(BlockTarget::Lambda(j));
    }

    let mut report = InnerReport {
        iters: 0,
        grad_phi_norm: f64::INFINITY,
        grad_lambda_norm: f64::INFINITY,
        converged: false,
    };

    for iter in 1..=config.max_inner_iters {
        match config.method {
            InnerMethod::ClosedForm => {
                return Err(CoreError::Unsupported(
                    "closed_form inner solve (objective provides no closed form)",
                ))
            }
            InnerMethod::BlockCoordinateDescent => {
                coordinate_descent_step(
                    oracle,
                    i,
                    &mut phi,
                    &mut lambda,
                    mu,
                    lambda0,
                    precond,
                    &order,
                    config.line_search,
                )?;
            }
            InnerMethod::GradientDescent => {
                let value =
                    al_value(oracle, i, phi.view(), lambda.view(), mu, lambda0, precond)?;
                let (gp, gl) =
                    al_grads(oracle, i, phi.view(), lambda.view(), mu, lambda0, precond)?;
                let grad_sq = gp.dot(&gp) + gl.dot(&gl);
                let base_phi = phi.clone();
                let base_lambda = lambda.clone();
                let accepted = backtrack_step(value, grad_sq, config.line_search, |step| {
                    let cand_phi = &base_phi - &(step * &gp);
                    let cand_lambda = &base_lambda - &(step * &gl);
                    al_value(
                        oracle,
                        i,
                        cand_phi.view(),
                        cand_lambda.view(),
                        mu,
                        lambda0,
                        precond,
                    )
                })?;
                if let Some((step, _)) = accepted {
                    phi = &base_phi - &(step * &gp);
                    lambda = &base_lambda - &(step * &gl);
                }
            }
        }
        if phi.iter().any(|x| !x.is_finite()) || lambda.iter().any(|x| !x.is_finite()) {
            return Err(CoreError::InnerDiverged { sample: i });
        }
        let (gp, gl) = al_grads(oracle, i, phi.view(), lambda.view(), mu, lambda0, precond)?;
        report.iters = iter;
        report.grad_phi_norm = norm2(&gp);
        report.grad_lambda_norm = norm2(&gl);
        if report.grad_phi_norm <= config.inner_tol && report.grad_lambda_norm <= config.inner_tol
        {
            report.converged = true;
            break;
        }
    }

    Ok(LocalSolution { phi, lambda, report })
}
