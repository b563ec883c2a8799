//! Strongly convex quadratic objective
//! `f_i(z) = z^T Q_i z + v_i^T z` with `z = (phi_i, lambda)`, plus instance
//! generators with a controlled condition number.

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::consensus::{
    BlockPartition, LipschitzEstimates, ObjectiveOracle, PreconditionerSpec,
};
use crate::error::{CoreError, Result};
use crate::linalg;
use crate::subsolver::{al_grads, InnerMethod, InnerReport, InnerSolverConfig, LocalSolution};

/// Per-sample SPD matrices and linear terms.
pub struct QuadraticObjective {
    qs: Vec<Array2<f64>>,
    vs: Vec<Array1<f64>>,
    d_phi: usize,
    partition: BlockPartition,
}

impl QuadraticObjective {
    pub fn new(
        qs: Vec<Array2<f64>>,
        vs: Vec<Array1<f64>>,
        d_phi: usize,
        partition: BlockPartition,
    ) -> Result<Self> {
        if qs.is_empty() || qs.len() != vs.len() {
            return Err(CoreError::InvalidConfig(
                "need one (Q_i, v_i) pair per sample".into(),
            ));
        }
        let dim = d_phi + partition.total_dim();
        for q in &qs {
            if q.nrows() != dim || q.ncols() != dim {
                return Err(CoreError::DimensionMismatch {
                    field: "Q_i",
                    expected: dim,
                    got: q.nrows(),
                });
            }
        }
        for v in &vs {
            if v.len() != dim {
                return Err(CoreError::DimensionMismatch {
                    field: "v_i",
                    expected: dim,
                    got: v.len(),
                });
            }
        }
        Ok(Self {
            qs,
            vs,
            d_phi,
            partition,
        })
    }

    pub fn q(&self, i: usize) -> &Array2<f64> {
        &self.qs[i]
    }

    fn joint(&self, phi: ArrayView1<f64>, lambda: ArrayView1<f64>) -> Array1<f64> {
        let mut z = Array1::zeros(self.d_phi + lambda.len());
        z.slice_mut(s![..self.d_phi]).assign(&phi);
        z.slice_mut(s![self.d_phi..]).assign(&lambda);
        z
    }

    fn check_inputs(&self, i: usize, phi: ArrayView1<f64>, lambda: ArrayView1<f64>) -> Result<()> {
        if i >= self.qs.len() {
            return Err(CoreError::IndexOutOfRange {
                index: i,
                n: self.qs.len(),
            });
        }
        if phi.len() != self.d_phi {
            return Err(CoreError::DimensionMismatch {
                field: "phi",
                expected: self.d_phi,
                got: phi.len(),
            });
        }
        if lambda.len() != self.partition.total_dim() {
            return Err(CoreError::DimensionMismatch {
                field: "lambda",
                expected: self.partition.total_dim(),
                got: lambda.len(),
            });
        }
        if phi.iter().chain(lambda.iter()).any(|x| !x.is_finite()) {
            return Err(CoreError::NonFinite { field: "phi/lambda" });
        }
        Ok(())
    }

    fn full_grad(&self, i: usize, z: &Array1<f64>) -> Array1<f64> {
        2.0 * self.qs[i].dot(z) + &self.vs[i]
    }
}

impl ObjectiveOracle for QuadraticObjective {
    fn n_samples(&self) -> usize {
        self.qs.len()
    }

    fn local_dim(&self) -> usize {
        self.d_phi
    }

    fn partition(&self) -> &BlockPartition {
        &self.partition
    }

    fn eval(&self, i: usize, phi: ArrayView1<f64>, lambda: ArrayView1<f64>) -> Result<f64> {
        self.check_inputs(i, phi, lambda)?;
        let z = self.joint(phi, lambda);
        Ok(z.dot(&self.qs[i].dot(&z)) + self.vs[i].dot(&z))
    }

    fn grad_phi(
        &self,
        i: usize,
        phi: ArrayView1<f64>,
        lambda: ArrayView1<f64>,
    ) -> Result<Array1<f64>> {
        self.check_inputs(i, phi, lambda)?;
        let z = self.joint(phi, lambda);
        Ok(self.full_grad(i, &z).slice(s![..self.d_phi]).to_owned())
    }

    fn grad_lambda(
        &self,
        i: usize,
        phi: ArrayView1<f64>,
        lambda: ArrayView1<f64>,
    ) -> Result<Array1<f64>> {
        self.check_inputs(i, phi, lambda)?;
        let z = self.joint(phi, lambda);
        Ok(self.full_grad(i, &z).slice(s![self.d_phi..]).to_owned())
    }

    fn optimize_phi(&self, i: usize, lambda: ArrayView1<f64>) -> Result<Array1<f64>> {
        if self.d_phi == 0 {
            return Ok(Array1::zeros(0));
        }
        // stationarity in phi: 2 Q_pp phi = -(v_p + 2 Q_pl lambda)
        let q = &self.qs[i];
        let qpp = q.slice(s![..self.d_phi, ..self.d_phi]).to_owned() * 2.0;
        let qpl = q.slice(s![..self.d_phi, self.d_phi..]);
        let rhs = -(self.vs[i].slice(s![..self.d_phi]).to_owned() + 2.0 * qpl.dot(&lambda));
        linalg::solve(&qpp.view(), &rhs.view())
    }

    fn lipschitz_estimates(&self) -> Option<LipschitzEstimates> {
        let dim = self.d_phi + self.partition.total_dim();
        let iters = 40 + 4 * dim;
        let mut l_phi: f64 = 0.0;
        let mut l_blocks = vec![0.0f64; self.partition.num_blocks()];
        for q in &self.qs {
            if self.d_phi > 0 {
                let rows = q.slice(s![..self.d_phi, ..]).to_owned();
                l_phi = l_phi.max(2.0 * linalg::spectral_norm(&rows.view(), iters));
            }
            for j in 0..self.partition.num_blocks() {
                let range = self.partition.block_range(j);
                let rows = q
                    .slice(s![self.d_phi + range.start..self.d_phi + range.end, ..])
                    .to_owned();
                l_blocks[j] = l_blocks[j].max(2.0 * linalg::spectral_norm(&rows.view(), iters));
            }
        }
        Some(LipschitzEstimates {
            l_phi,
            l_lambda_blocks: l_blocks,
        })
    }

    fn solve_local_al(
        &self,
        i: usize,
        mu: ArrayView1<f64>,
        lambda0: ArrayView1<f64>,
        precond: &PreconditionerSpec,
        init_phi: ArrayView1<f64>,
        init_lambda: ArrayView1<f64>,
        config: &InnerSolverConfig,
    ) -> Result<LocalSolution> {
        if config.method != InnerMethod::ClosedForm {
            return crate::subsolver::solve_local_al(
                self, i, mu, lambda0, precond, init_phi, init_lambda, config,
            );
        }
        self.check_inputs(i, init_phi, init_lambda)?;
        precond.validate(&self.partition)?;
        // stationarity: (2Q + blkdiag(0, D_eta)) z = -v - [0; mu - D_eta lambda0]
        let d_lambda = self.partition.total_dim();
        let dim = self.d_phi + d_lambda;
        let inv_etas = precond.coordinate_inv_etas(&self.partition);
        let mut a = 2.0 * &self.qs[i];
        let mut rhs = -self.vs[i].clone();
        for idx in 0..d_lambda {
            a[[self.d_phi + idx, self.d_phi + idx]] += inv_etas[idx];
            rhs[self.d_phi + idx] -= mu[idx] - inv_etas[idx] * lambda0[idx];
        }
        debug_assert_eq!(a.nrows(), dim);
        let z = linalg::solve(&a.view(), &rhs.view())?;
        let phi = z.slice(s![..self.d_phi]).to_owned();
        let lambda = z.slice(s![self.d_phi..]).to_owned();
        let (gp, gl) = al_grads(self, i, phi.view(), lambda.view(), mu, lambda0, precond)?;
        Ok(LocalSolution {
            phi,
            lambda,
            report: InnerReport {
                iters: 1,
                grad_phi_norm: gp.dot(&gp).sqrt(),
                grad_lambda_norm: gl.dot(&gl).sqrt(),
                converged: true,
            },
        })
    }
}

fn random_rotation(dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let normal = StandardNormal;
    let mut r = Array2::zeros((dim, dim));
    for x in r.iter_mut() {
        *x = normal.sample(rng);
    }
    linalg::orthonormalize(&mut r);
    r
}

/// SPD matrix `R^T diag(eigs) R` with a seeded random rotation.
fn spd_with_spectrum(eigs: &[f64], rng: &mut ChaCha8Rng) -> Array2<f64> {
    let dim = eigs.len();
    let r = random_rotation(dim, rng);
    // R^T D R
    let mut dr = r.clone();
    for (k, mut row) in dr.rows_mut().into_iter().enumerate() {
        row.mapv_inplace(|x| x * eigs[k]);
    }
    r.t().dot(&dr)
}

fn log_spaced(count: usize, lo: f64, hi: f64) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    (0..count)
        .map(|k| {
            let frac = k as f64 / (count - 1) as f64;
            (lo.ln() + frac * (hi.ln() - lo.ln())).exp()
        })
        .collect()
}

/// Generates per-sample SPD `Q_i = R^T D R` with log-spaced eigenvalues
/// spanning exactly `[1, cond]` and `v_i = 0`, so the optimum value is zero.
pub fn generate_quadratic_instance(
    n: usize,
    d_phi: usize,
    d_lambda: usize,
    cond: f64,
    seed: u64,
) -> Result<QuadraticObjective> {
    if cond < 1.0 {
        return Err(CoreError::InvalidConfig("cond must be >= 1".into()));
    }
    let dim = d_phi + d_lambda;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eigs = log_spaced(dim, 1.0, cond);
    let qs = (0..n).map(|_| spd_with_spectrum(&eigs, &mut rng)).collect();
    let vs = vec![Array1::zeros(dim); n];
    QuadraticObjective::new(qs, vs, d_phi, BlockPartition::single(d_lambda)?)
}

/// Quadratic instance whose global variable splits into blocks with prescribed
/// curvature scales: `Q_i = blkdiag(Q_phi, s_1 Q_1, ..., s_B Q_B)` with each
/// sub-block conditioned within `cond_within`. Block Lipschitz constants then
/// differ by the ratios of `block_scales`.
pub fn generate_block_scaled_quadratic(
    n: usize,
    d_phi: usize,
    block_dims: &[usize],
    block_scales: &[f64],
    cond_within: f64,
    seed: u64,
) -> Result<QuadraticObjective> {
    if block_dims.len() != block_scales.len() {
        return Err(CoreError::InvalidConfig(
            "block_dims and block_scales must align".into(),
        ));
    }
    if cond_within < 1.0 || block_scales.iter().any(|&s| !(s > 0.0)) {
        return Err(CoreError::InvalidConfig(
            "cond_within >= 1 and positive block scales required".into(),
        ));
    }
    let d_lambda: usize = block_dims.iter().sum();
    let dim = d_phi + d_lambda;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut qs = Vec::with_capacity(n);
    for _ in 0..n {
        let mut q = Array2::zeros((dim, dim));
        if d_phi > 0 {
            let eigs = log_spaced(d_phi, 1.0, cond_within);
            let sub = spd_with_spectrum(&eigs, &mut rng);
            q.slice_mut(s![..d_phi, ..d_phi]).assign(&sub);
        }
        let mut offset = d_phi;
        for (bd, scale) in block_dims.iter().zip(block_scales.iter()) {
            let eigs: Vec<f64> = log_spaced(*bd, 1.0, cond_within)
                .into_iter()
                .map(|e| e * scale)
                .collect();
            let sub = spd_with_spectrum(&eigs, &mut rng);
            q.slice_mut(s![offset..offset + bd, offset..offset + bd])
                .assign(&sub);
            offset += bd;
        }
        qs.push(q);
    }
    let vs = vec![Array1::zeros(dim); n];
    QuadraticObjective::new(qs, vs, d_phi, BlockPartition::new(block_dims.to_vec())?)
}
