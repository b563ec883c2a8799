//! Mean-field Gaussian-mixture negative ELBO.
//!
//! Per-sample objective for data point `x_i` with cluster responsibilities
//! `phi_i = softmax(alpha_i)` (local) and global variational parameters
//! `m in R^{K x d}`, `rho = log s^2 in R^{K x d}`:
//!
//! `f_i = sum_k phi_ik [log phi_ik + 1/2 sum_j (m_kj^2 + e^rho_kj - 2 x_ij m_kj)/sigma0_j^2]`
//! `    + (1/2n) sum_{k,j} [(m_kj^2 + e^rho_kj - 2 xi_j m_kj)/sigma1_j^2 - rho_kj]`
//!
//! plus an optional per-sample additive constant; traces normally exclude it.

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::consensus::{
    BlockPartition, BlockTarget, LipschitzEstimates, ObjectiveOracle, PreconditionerSpec,
};
use crate::error::{CoreError, Result};

pub const RHO_CLIP: f64 = 30.0;
const PHI_FLOOR: f64 = 1e-12;

/// Fixed hyperparameters of the Bayesian mixture: prior mean `xi`, diagonal
/// likelihood variance `sigma0_sq`, diagonal prior variance `sigma1_sq`.
#[derive(Debug, Clone)]
pub struct GmmHyperParams {
    pub xi: Array1<f64>,
    pub sigma0_sq: Array1<f64>,
    pub sigma1_sq: Array1<f64>,
    pub k: usize,
}

impl GmmHyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(CoreError::InvalidConfig("K must be >= 1".into()));
        }
        let d = self.xi.len();
        if self.sigma0_sq.len() != d || self.sigma1_sq.len() != d {
            return Err(CoreError::DimensionMismatch {
                field: "hyper variances",
                expected: d,
                got: self.sigma0_sq.len(),
            });
        }
        if self
            .sigma0_sq
            .iter()
            .chain(self.sigma1_sq.iter())
            .any(|&v| !(v > 0.0))
        {
            return Err(CoreError::InvalidConfig("variances must be > 0".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.xi.len()
    }
}

pub(crate) fn softmax(alpha: ArrayView1<f64>) -> Array1<f64> {
    let max = alpha.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Array1<f64> = alpha.mapv(|a| (a - max).exp());
    let sum = out.sum();
    out /= sum;
    out
}

pub(crate) fn clipped_exp(rho: f64) -> f64 {
    rho.clamp(-RHO_CLIP, RHO_CLIP).exp()
}

/// Global-parameter layout: `lambda = [m row-major (K*d), rho row-major (K*d)]`
/// partitioned into an m-block and a rho-block.
pub struct GmmObjective {
    data: Array2<f64>,
    hyper: GmmHyperParams,
    include_constants: bool,
    partition: BlockPartition,
    clip_events: AtomicUsize,
}

impl GmmObjective {
    pub fn new(data: Array2<f64>, hyper: GmmHyperParams, include_constants: bool) -> Result<Self> {
        hyper.validate()?;
        if data.ncols() != hyper.dim() {
            return Err(CoreError::DimensionMismatch {
                field: "data columns",
                expected: hyper.dim(),
                got: data.ncols(),
            });
        }
        if data.nrows() == 0 {
            return Err(CoreError::InvalidConfig("need at least one data row".into()));
        }
        let kd = hyper.k * hyper.dim();
        Ok(Self {
            data,
            hyper,
            include_constants,
            partition: BlockPartition::new(vec![kd, kd])?,
            clip_events: AtomicUsize::new(0),
        })
    }

    pub fn hyper(&self) -> &GmmHyperParams {
        &self.hyper
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    /// Number of times the rho clip activated during evaluation.
    pub fn clip_events(&self) -> usize {
        self.clip_events.load(Ordering::Relaxed)
    }

    fn k(&self) -> usize {
        self.hyper.k
    }

    fn d(&self) -> usize {
        self.hyper.dim()
    }

    fn m_at<'a>(&self, lambda: &'a ArrayView1<f64>, k: usize, j: usize) -> f64 {
        lambda[k * self.d() + j]
    }

    fn rho_at<'a>(&self, lambda: &'a ArrayView1<f64>, k: usize, j: usize) -> f64 {
        lambda[self.k() * self.d() + k * self.d() + j]
    }

    fn exp_rho(&self, rho: f64) -> f64 {
        if rho.abs() > RHO_CLIP {
            self.clip_events.fetch_add(1, Ordering::Relaxed);
        }
        clipped_exp(rho)
    }

    /// `1/2 sum_j (m_kj^2 + e^rho_kj - 2 x_ij m_kj) / sigma0_j^2` for cluster k.
    fn data_cost(&self, i: usize, lambda: &ArrayView1<f64>, k: usize) -> f64 {
        let mut acc = 0.0;
        for j in 0..self.d() {
            let m = self.m_at(lambda, k, j);
            let s2 = self.exp_rho(self.rho_at(lambda, k, j));
            acc += (m * m + s2 - 2.0 * self.data[[i, j]] * m) / self.hyper.sigma0_sq[j];
        }
        0.5 * acc
    }

    fn prior_terms(&self, lambda: &ArrayView1<f64>) -> f64 {
        let mut acc = 0.0;
        for k in 0..self.k() {
            for j in 0..self.d() {
                let m = self.m_at(lambda, k, j);
                let rho = self.rho_at(lambda, k, j);
                let s2 = self.exp_rho(rho);
                acc += (m * m + s2 - 2.0 * self.hyper.xi[j] * m) / self.hyper.sigma1_sq[j] - rho;
            }
        }
        0.5 * acc
    }

    fn constant_term(&self, i: usize) -> f64 {
        let n = self.data.nrows() as f64;
        let mut acc = 0.0;
        for j in 0..self.d() {
            let x = self.data[[i, j]];
            acc += 0.5
                * ((2.0 * std::f64::consts::PI * self.hyper.sigma0_sq[j]).ln()
                    + x * x / self.hyper.sigma0_sq[j]);
        }
        let mut prior = 0.0;
        for j in 0..self.d() {
            prior += self.hyper.sigma1_sq[j].ln()
                + self.hyper.xi[j] * self.hyper.xi[j] / self.hyper.sigma1_sq[j]
                - 1.0;
        }
        acc + self.k() as f64 * prior / (2.0 * n)
    }

    fn check_inputs(&self, i: usize, phi: ArrayView1<f64>, lambda: ArrayView1<f64>) -> Result<()> {
        if i >= self.data.nrows() {
            return Err(CoreError::IndexOutOfRange {
                index: i,
                n: self.data.nrows(),
            });
        }
        if phi.len() != self.k() {
            return Err(CoreError::DimensionMismatch {
                field: "alpha",
                expected: self.k(),
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
            return Err(CoreError::NonFinite { field: "alpha/lambda" });
        }
        Ok(())
    }
}

impl ObjectiveOracle for GmmObjective {
    fn n_samples(&self) -> usize {
        self.data.nrows()
    }

    fn local_dim(&self) -> usize {
        self.k()
    }

    fn partition(&self) -> &BlockPartition {
        &self.partition
    }

    fn eval(&self, i: usize, alpha: ArrayView1<f64>, lambda: ArrayView1<f64>) -> Result<f64> {
        self.check_inputs(i, alpha, lambda)?;
        let phi = softmax(alpha);
        let n = self.data.nrows() as f64;
        let mut value = 0.0;
        for k in 0..self.k() {
            let p = phi[k].max(PHI_FLOOR);
            value += phi[k] * (p.ln() + self.data_cost(i, &lambda, k));
        }
        value += self.prior_terms(&lambda) / n;
        if self.include_constants {
            value += self.constant_term(i);
        }
        Ok(value)
    }

    fn grad_phi(
        &self,
        i: usize,
        alpha: ArrayView1<f64>,
        lambda: ArrayView1<f64>,
    ) -> Result<Array1<f64>> {
        self.check_inputs(i, alpha, lambda)?;
        let phi = softmax(alpha);
        // dF/dphi_k = log phi_k + 1 + cost_k, then chain through softmax
        let mut a = Array1::zeros(self.k());
        for k in 0..self.k() {
            a[k] = phi[k].max(PHI_FLOOR).ln() + 1.0 + self.data_cost(i, &lambda, k);
        }
        let mean: f64 = (0..self.k()).map(|k| phi[k] * a[k]).sum();
        let mut g = Array1::zeros(self.k());
        for k in 0..self.k() {
            g[k] = phi[k] * (a[k] - mean);
        }
        Ok(g)
    }

    fn grad_lambda(
        &self,
        i: usize,
        alpha: ArrayView1<f64>,
        lambda: ArrayView1<f64>,
    ) -> Result<Array1<f64>> {
        self.check_inputs(i, alpha, lambda)?;
        let phi = softmax(alpha);
        let n = self.data.nrows() as f64;
        let (kk, d) = (self.k(), self.d());
        let mut g = Array1::zeros(2 * kk * d);
        for k in 0..kk {
            for j in 0..d {
                let m = self.m_at(&lambda, k, j);
                let rho = self.rho_at(&lambda, k, j);
                let s2 = self.exp_rho(rho);
                let s0 = self.hyper.sigma0_sq[j];
                let s1 = self.hyper.sigma1_sq[j];
                g[k * d + j] =
                    phi[k] * (m - self.data[[i, j]]) / s0 + (m - self.hyper.xi[j]) / (n * s1);
                g[kk * d + k * d + j] =
                    0.5 * phi[k] * s2 / s0 + 0.5 * (s2 / s1 - 1.0) / n;
            }
        }
        Ok(g)
    }

    fn optimize_phi(&self, i: usize, lambda: ArrayView1<f64>) -> Result<Array1<f64>> {
        // phi_k proportional to exp(-cost_k); centered logits pin the gauge
        let mut alpha = Array1::zeros(self.k());
        for k in 0..self.k() {
            alpha[k] = -self.data_cost(i, &lambda, k);
        }
        let mean = alpha.sum() / self.k() as f64;
        alpha -= mean;
        Ok(alpha)
    }

    fn lipschitz_estimates(&self) -> Option<LipschitzEstimates> {
        let n = self.data.nrows() as f64;
        let mut l_m: f64 = 0.0;
        let mut l_rho: f64 = 0.0;
        for j in 0..self.d() {
            let s0 = self.hyper.sigma0_sq[j];
            let s1 = self.hyper.sigma1_sq[j];
            l_m = l_m.max(1.0 / s0 + 1.0 / (n * s1));
            // curvature of the e^rho terms evaluated at the likelihood scale
            l_rho = l_rho.max(0.5 * (1.0 + s0 / (n * s1)));
        }
        Some(LipschitzEstimates {
            l_phi: 1.0,
            l_lambda_blocks: vec![l_m, l_rho],
        })
    }

    fn exact_block_min(
        &self,
        i: usize,
        target: BlockTarget,
        alpha: ArrayView1<f64>,
        lambda: ArrayView1<f64>,
        mu: ArrayView1<f64>,
        lambda0: ArrayView1<f64>,
        precond: &PreconditionerSpec,
    ) -> Result<Option<Array1<f64>>> {
        let (kk, d) = (self.k(), self.d());
        let n = self.data.nrows() as f64;
        let inv_etas = precond.coordinate_inv_etas(&self.partition);
        match target {
            BlockTarget::Phi => Ok(Some(self.optimize_phi(i, lambda)?)),
            BlockTarget::Lambda(0) => {
                // quadratic in each m_kj
                let phi = softmax(alpha);
                let mut out = Array1::zeros(kk * d);
                for k in 0..kk {
                    for j in 0..d {
                        let idx = k * d + j;
                        let s0 = self.hyper.sigma0_sq[j];
                        let s1 = self.hyper.sigma1_sq[j];
                        let curv = phi[k] / s0 + 1.0 / (n * s1) + inv_etas[idx];
                        let rhs = phi[k] * self.data[[i, j]] / s0
                            + self.hyper.xi[j] / (n * s1)
                            - mu[idx]
                            + inv_etas[idx] * lambda0[idx];
                        out[idx] = rhs / curv;
                    }
                }
                Ok(Some(out))
            }
            BlockTarget::Lambda(1) => {
                // 1-D strictly convex a e^rho + b rho + c/2 (rho - rho0)^2 per coordinate
                let phi = softmax(alpha);
                let mut out = Array1::zeros(kk * d);
                for k in 0..kk {
                    for j in 0..d {
                        let g_idx = kk * d + k * d + j;
                        let s0 = self.hyper.sigma0_sq[j];
                        let s1 = self.hyper.sigma1_sq[j];
                        let a = 0.5 * (phi[k] / s0 + 1.0 / (n * s1));
                        let b = -0.5 / n + mu[g_idx];
                        let c = inv_etas[g_idx];
                        let rho0 = lambda0[g_idx];
                        out[k * d + j] = solve_exp_linear(a, b, c, rho0, lambda[g_idx]);
                    }
                }
                Ok(Some(out))
            }
            BlockTarget::Lambda(_) => Ok(None),
        }
    }

    fn svi_natural_update(
        &self,
        phis: &[Array1<f64>],
        lambda: &Array1<f64>,
        batch: &[usize],
        rho_step: f64,
    ) -> Option<Array1<f64>> {
        let (kk, d) = (self.k(), self.d());
        let n = self.data.nrows() as f64;
        let scale = n / batch.len() as f64;
        // batch sufficient statistics, rescaled to full-data size
        let mut nk = Array1::<f64>::zeros(kk);
        let mut sx = Array2::<f64>::zeros((kk, d));
        for &i in batch {
            let phi = softmax(phis[i].view());
            for k in 0..kk {
                nk[k] += scale * phi[k];
                for j in 0..d {
                    sx[[k, j]] += scale * phi[k] * self.data[[i, j]];
                }
            }
        }
        let mut out = lambda.clone();
        for k in 0..kk {
            for j in 0..d {
                let s1 = self.hyper.sigma1_sq[j];
                let s0 = self.hyper.sigma0_sq[j];
                let target_prec = 1.0 / s1 + nk[k] / s0;
                let target_mp = self.hyper.xi[j] / s1 + sx[[k, j]] / s0;
                let cur_s2 = clipped_exp(lambda[kk * d + k * d + j]);
                let cur_prec = 1.0 / cur_s2;
                let cur_mp = lambda[k * d + j] / cur_s2;
                let new_prec = (1.0 - rho_step) * cur_prec + rho_step * target_prec;
                let new_mp = (1.0 - rho_step) * cur_mp + rho_step * target_mp;
                out[k * d + j] = new_mp / new_prec;
                out[kk * d + k * d + j] = -(new_prec.ln());
            }
        }
        Some(out)
    }
}

/// Root of `a e^rho + b + c (rho - rho0) = 0` (strictly increasing in rho),
/// i.e. the minimizer of `a e^rho + b rho + c/2 (rho - rho0)^2`. Safeguarded
/// Newton within the rho clip range.
pub(crate) fn solve_exp_linear(a: f64, b: f64, c: f64, rho0: f64, init: f64) -> f64 {
    let g = |rho: f64| a * rho.clamp(-RHO_CLIP, RHO_CLIP).exp() + b + c * (rho - rho0);
    let mut lo = -RHO_CLIP - 10.0;
    let mut hi = RHO_CLIP + 10.0;
    if g(lo) >= 0.0 {
        return lo.max(-RHO_CLIP);
    }
    if g(hi) <= 0.0 {
        return hi.min(RHO_CLIP);
    }
    let mut x = init.clamp(lo, hi);
    for _ in 0..100 {
        let gx = g(x);
        if gx.abs() < 1e-14 {
            break;
        }
        if gx > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let dgx = a * x.clamp(-RHO_CLIP, RHO_CLIP).exp() + c;
        let newton = x - gx / dgx;
        x = if newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo < 1e-15 {
            break;
        }
    }
    x
}

/// Empirical-Bayes hyperparameters from a seeded k-means clustering:
/// `xi` = grand mean, `sigma0_sq` = average within-cluster variance,
/// `sigma1_sq` = variance of cluster means (floored when degenerate).
/// Returns the k-means labels for initializing the global iterate.
pub fn gmm_hyper_from_data(
    x: &Array2<f64>,
    k: usize,
    seed: u64,
) -> Result<(GmmHyperParams, Vec<usize>)> {
    let (n, d) = (x.nrows(), x.ncols());
    if n < k || k == 0 {
        return Err(CoreError::InvalidConfig(format!(
            "need at least K={k} points, got {n}"
        )));
    }
    let (labels, centroids) = crate::data::kmeans(x, k, seed, 50)?;
    let xi = x.mean_axis(Axis(0)).unwrap();

    // average within-cluster variance per dimension
    let mut sigma0_sq = Array1::<f64>::zeros(d);
    for i in 0..n {
        for j in 0..d {
            let diff = x[[i, j]] - centroids[[labels[i], j]];
            sigma0_sq[j] += diff * diff;
        }
    }
    sigma0_sq /= n as f64;

    // variance of cluster means per dimension, floored when degenerate
    let data_var = {
        let mut v = Array1::<f64>::zeros(d);
        for i in 0..n {
            for j in 0..d {
                let diff = x[[i, j]] - xi[j];
                v[j] += diff * diff;
            }
        }
        v / n as f64
    };
    let mean_of_centroids = centroids.mean_axis(Axis(0)).unwrap();
    let mut sigma1_sq = Array1::<f64>::zeros(d);
    for c in 0..k {
        for j in 0..d {
            let diff = centroids[[c, j]] - mean_of_centroids[j];
            sigma1_sq[j] += diff * diff;
        }
    }
    sigma1_sq /= k as f64;
    for j in 0..d {
        let floor = 1e-6 * data_var[j].max(1e-12);
        if sigma1_sq[j] < floor {
            sigma1_sq[j] = floor;
        }
        if sigma0_sq[j] <= 0.0 {
            sigma0_sq[j] = floor;
        }
    }

    Ok((
        GmmHyperParams {
            xi,
            sigma0_sq,
            sigma1_sq,
            k,
        },
        labels,
    ))
}

/// Packs `(m, rho)` matrices into the flat global layout.
pub fn pack_lambda(m: &Array2<f64>, rho: &Array2<f64>) -> Array1<f64> {
    let kd = m.len();
    let mut out = Array1::zeros(2 * kd);
    for (idx, &v) in m.iter().enumerate() {
        out[idx] = v;
    }
    for (idx, &v) in rho.iter().enumerate() {
        out[kd + idx] = v;
    }
    out
}

/// Global iterate from a hard labeling: component means are the label-wise
/// data means (empty labels fall back to the prior mean), log-variances start
/// at the likelihood variance.
pub fn init_lambda_from_labels(
    x: &Array2<f64>,
    labels: &[usize],
    hyper: &GmmHyperParams,
) -> Result<Array1<f64>> {
    let (k, d) = (hyper.k, hyper.dim());
    if labels.len() != x.nrows() {
        return Err(CoreError::DimensionMismatch {
            field: "init_lambda_from_labels: labels",
            expected: x.nrows(),
            got: labels.len(),
        });
    }
    let mut means = Array2::zeros((k, d));
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(CoreError::IndexOutOfRange { index: l, n: k });
        }
        counts[l] += 1;
        for j in 0..d {
            means[[l, j]] += x[[i, j]];
        }
    }
    for c in 0..k {
        for j in 0..d {
            means[[c, j]] = if counts[c] > 0 {
                means[[c, j]] / counts[c] as f64
            } else {
                hyper.xi[j]
            };
        }
    }
    let rho = Array2::from_shape_fn((k, d), |(_, j)| hyper.sigma0_sq[j].ln());
    Ok(pack_lambda(&means, &rho))
}

/// Splits the flat global layout back into `(m, rho)` matrices.
pub fn unpack_lambda(lambda: &ArrayView1<f64>, k: usize, d: usize) -> (Array2<f64>, Array2<f64>) {
    let kd = k * d;
    let m = Array2::from_shape_vec((k, d), lambda.slice(ndarray::s![..kd]).to_vec()).unwrap();
    let rho = Array2::from_shape_vec((k, d), lambda.slice(ndarray::s![kd..]).to_vec()).unwrap();
    (m, rho)
}
