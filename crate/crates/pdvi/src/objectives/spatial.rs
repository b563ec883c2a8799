//! Potts-augmented spatial mixture objective with patch decomposition.
//!
//! The mixture negative ELBO gains a pairwise coupling over a spatial
//! neighborhood graph: each undirected edge `(i, j)` with weight `r_ij`
//! contributes `-r_ij sum_k phi_ik phi_jk` to the total. Splitting per node
//! gives `-1/2 sum_{l in N(i)} r_il sum_k phi_ik phi_lk` so that summing over
//! nodes counts each edge exactly once. The graph is restricted to
//! within-patch edges and each patch becomes one sample of the finite sum,
//! so local solves stay decoupled. The Potts normalizing constant is additive
//! in the parameters of interest and is never computed.

use ndarray::{Array1, ArrayView1, s};

use crate::consensus::{
    BlockPartition, BlockTarget, LipschitzEstimates, ObjectiveOracle, PreconditionerSpec,
};
use crate::error::{CoreError, Result};
use crate::objectives::gmm::{clipped_exp, softmax, solve_exp_linear, GmmHyperParams};

/// `r_ij = |g_i . (l_j - l_i)| / (||g_i|| ||l_j - l_i||) + tau (cos(x_i, x_j) + 1)`.
/// A zero-norm vector makes its cosine term 0; the boolean flags that case.
pub fn edge_weight(
    g_i: ArrayView1<f64>,
    l_i: ArrayView1<f64>,
    l_j: ArrayView1<f64>,
    x_i: ArrayView1<f64>,
    x_j: ArrayView1<f64>,
    tau: f64,
) -> (f64, bool) {
    let mut warned = false;
    let disp = &l_j.to_owned() - &l_i;
    let disp_norm = disp.dot(&disp).sqrt();
    let g_norm = g_i.dot(&g_i).sqrt();
    let flow = if g_norm == 0.0 || disp_norm == 0.0 {
        warned = true;
        0.0
    } else {
        (g_i.dot(&disp) / (g_norm * disp_norm)).abs()
    };
    let xi_norm = x_i.dot(&x_i).sqrt();
    let xj_norm = x_j.dot(&x_j).sqrt();
    let feat = if xi_norm == 0.0 || xj_norm == 0.0 {
        warned = true;
        0.0
    } else {
        tau * (x_i.dot(&x_j) / (xi_norm * xj_norm) + 1.0)
    };
    (flow + feat, warned)
}

/// Undirected weighted neighborhood graph with a patch assignment per node.
#[derive(Debug, Clone)]
pub struct SpatialGraph {
    n: usize,
    neighbors: Vec<Vec<(usize, f64)>>,
    patches: Vec<usize>,
    num_patches: usize,
    /// Count of zero-norm cosine terms encountered while weighting edges.
    pub zero_norm_warnings: usize,
}

impl SpatialGraph {
    /// Builds the adjacency from an undirected edge list `(i, j, r_ij)`.
    /// With no patch assignment every node lands in patch 0.
    pub fn from_edges(
        n: usize,
        edges: &[(usize, usize, f64)],
        patches: Option<Vec<usize>>,
    ) -> Result<Self> {
        let patches = patches.unwrap_or_else(|| vec![0; n]);
        if patches.len() != n {
            return Err(CoreError::DimensionMismatch {
                field: "patches",
                expected: n,
                got: patches.len(),
            });
        }
        let num_patches = patches.iter().copied().max().map_or(1, |m| m + 1);
        let mut neighbors = vec![Vec::new(); n];
        for &(i, j, r) in edges {
            if i >= n || j >= n {
                return Err(CoreError::IndexOutOfRange { index: i.max(j), n });
            }
            if i == j {
                return Err(CoreError::InvalidConfig("self-edge in spatial graph".into()));
            }
            if !r.is_finite() || r < 0.0 {
                return Err(CoreError::InvalidConfig(format!(
                    "edge weight ({i},{j}) must be finite and >= 0"
                )));
            }
            neighbors[i].push((j, r));
            neighbors[j].push((i, r));
        }
        for nb in &mut neighbors {
            nb.sort_by_key(|&(j, _)| j);
        }
        Ok(Self {
            n,
            neighbors,
            patches,
            num_patches,
            zero_norm_warnings: 0,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn num_patches(&self) -> usize {
        self.num_patches
    }

    pub fn patch_of(&self, i: usize) -> usize {
        self.patches[i]
    }

    pub fn patches(&self) -> &[usize] {
        &self.patches
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.neighbors[i]
    }

    pub fn num_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn has_cross_patch_edges(&self) -> bool {
        (0..self.n).any(|i| {
            self.neighbors[i]
                .iter()
                .any(|&(j, _)| self.patches[i] != self.patches[j])
        })
    }

    /// Drops every edge whose endpoints live in different patches.
    pub fn restrict_to_patches(&self) -> Self {
        let mut out = self.clone();
        for i in 0..self.n {
            let pi = self.patches[i];
            out.neighbors[i].retain(|&(j, _)| self.patches[j] == pi);
        }
        out
    }
}

/// Per-node Potts penalty `-1/2 sum_{l in N(i)} r_il <phi_i, phi_l>` and its
/// gradients with respect to the logits of node `i` and each neighbor.
/// `alphas` holds the logits of every node (only `i` and its neighbors are read).
pub fn potts_penalty_eval_grad(
    i: usize,
    alphas: &[Array1<f64>],
    graph: &SpatialGraph,
) -> Result<(f64, Vec<(usize, Array1<f64>)>)> {
    if i >= graph.n_nodes() {
        return Err(CoreError::IndexOutOfRange { index: i, n: graph.n_nodes() });
    }
    if alphas.len() != graph.n_nodes() {
        return Err(CoreError::DimensionMismatch {
            field: "alphas",
            expected: graph.n_nodes(),
            got: alphas.len(),
        });
    }
    let k = alphas[i].len();
    let phi_i = softmax(alphas[i].view());
    let mut value = 0.0;
    // u = dF/dphi_i accumulated over neighbors
    let mut u = Array1::<f64>::zeros(k);
    let mut grads = Vec::with_capacity(1 + graph.neighbors(i).len());
    for &(l, r) in graph.neighbors(i) {
        if alphas[l].len() != k {
            return Err(CoreError::DimensionMismatch {
                field: "neighbor logits",
                expected: k,
                got: alphas[l].len(),
            });
        }
        let phi_l = softmax(alphas[l].view());
        value -= 0.5 * r * phi_i.dot(&phi_l);
        u.scaled_add(-0.5 * r, &phi_l);
        // dF/dphi_l = -1/2 r phi_i, chained through l's softmax
        let inner = -0.5 * r * phi_l.dot(&phi_i);
        let mut gl = Array1::zeros(k);
        for kk in 0..k {
            gl[kk] = phi_l[kk] * (-0.5 * r * phi_i[kk] - inner);
        }
        grads.push((l, gl));
    }
    let inner = phi_i.dot(&u);
    let mut gi = Array1::zeros(k);
    for kk in 0..k {
        gi[kk] = phi_i[kk] * (u[kk] - inner);
    }
    grads.insert(0, (i, gi));
    Ok((value, grads))
}

const PHI_FLOOR: f64 = 1e-12;

/// Patch-decomposed spatial objective. Each patch is one sample of the finite
/// sum; its local variable stacks the logits of all member nodes (padded to
/// the largest patch so every sample shares one local dimension). The global
/// variable keeps the mixture layout `[m | rho]`.
pub struct SpatialObjective {
    data: ndarray::Array2<f64>,
    hyper: GmmHyperParams,
    graph: SpatialGraph,
    include_constants: bool,
    partition: BlockPartition,
    /// Node ids per patch, in ascending order; slot index within the patch is
    /// the node's position here.
    patch_members: Vec<Vec<usize>>,
    /// node id -> (patch, slot)
    slot_of: Vec<(usize, usize)>,
    max_patch: usize,
}

impl SpatialObjective {
    pub fn new(
        data: ndarray::Array2<f64>,
        hyper: GmmHyperParams,
        graph: &SpatialGraph,
        include_constants: bool,
    ) -> Result<Self> {
        hyper.validate()?;
        if data.nrows() != graph.n_nodes() {
            return Err(CoreError::DimensionMismatch {
                field: "data rows",
                expected: graph.n_nodes(),
                got: data.nrows(),
            });
        }
        if data.ncols() != hyper.dim() {
            return Err(CoreError::DimensionMismatch {
                field: "data columns",
                expected: hyper.dim(),
                got: data.ncols(),
            });
        }
        let graph = graph.restrict_to_patches();
        let mut patch_members = vec![Vec::new(); graph.num_patches()];
        for i in 0..graph.n_nodes() {
            patch_members[graph.patch_of(i)].push(i);
        }
        if patch_members.iter().any(Vec::is_empty) {
            return Err(CoreError::InvalidConfig("empty patch in spatial graph".into()));
        }
        let mut slot_of = vec![(0, 0); graph.n_nodes()];
        for (b, members) in patch_members.iter().enumerate() {
            for (s, &i) in members.iter().enumerate() {
                slot_of[i] = (b, s);
            }
        }
        let max_patch = patch_members.iter().map(Vec::len).max().unwrap();
        let kd = hyper.k * hyper.dim();
        Ok(Self {
            data,
            hyper,
            graph,
            include_constants,
            partition: BlockPartition::new(vec![kd, kd])?,
            patch_members,
            slot_of,
            max_patch,
        })
    }

    pub fn hyper(&self) -> &GmmHyperParams {
        &self.hyper
    }

    pub fn graph(&self) -> &SpatialGraph {
        &self.graph
    }

    pub fn patch_members(&self, b: usize) -> &[usize] {
        &self.patch_members[b]
    }

    pub fn max_patch_size(&self) -> usize {
        self.max_patch
    }

    fn k(&self) -> usize {
        self.hyper.k
    }

    fn d(&self) -> usize {
        self.hyper.dim()
    }

    fn n_data(&self) -> f64 {
        self.data.nrows() as f64
    }

    /// Finite-sum scale so that `(1/B) sum_b f_b` averages over data points.
    fn scale(&self) -> f64 {
        self.patch_members.len() as f64 / self.n_data()
    }

    fn slot_logits<'a>(&self, phi: &ArrayView1<'a, f64>, s: usize) -> ArrayView1<'a, f64> {
        phi.reborrow().slice_move(s![s * self.k()..(s + 1) * self.k()])
    }

    fn m_at(&self, lambda: &ArrayView1<f64>, k: usize, j: usize) -> f64 {
        lambda[k * self.d() + j]
    }

    fn rho_at(&self, lambda: &ArrayView1<f64>, k: usize, j: usize) -> f64 {
        lambda[self.k() * self.d() + k * self.d() + j]
    }

    /// `1/2 sum_j (m^2 + e^rho - 2 x_ij m)/sigma0_j^2` for node `i`, cluster `k`.
    fn data_cost(&self, i: usize, lambda: &ArrayView1<f64>, k: usize) -> f64 {
        let mut acc = 0.0;
        for j in 0..self.d() {
            let m = self.m_at(lambda, k, j);
            let s2 = clipped_exp(self.rho_at(lambda, k, j));
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
                acc += (m * m + clipped_exp(rho) - 2.0 * self.hyper.xi[j] * m)
                    / self.hyper.sigma1_sq[j]
                    - rho;
            }
        }
        0.5 * acc
    }

    fn constant_terms(&self, b: usize) -> f64 {
        let mut acc = 0.0;
        for &i in &self.patch_members[b] {
            for j in 0..self.d() {
                let x = self.data[[i, j]];
                acc += 0.5
                    * ((2.0 * std::f64::consts::PI * self.hyper.sigma0_sq[j]).ln()
                        + x * x / self.hyper.sigma0_sq[j]);
            }
        }
        let mut prior = 0.0;
        for j in 0..self.d() {
            prior += self.hyper.sigma1_sq[j].ln()
                + self.hyper.xi[j] * self.hyper.xi[j] / self.hyper.sigma1_sq[j]
                - 1.0;
        }
        acc + self.prior_weight(b) * self.k() as f64 * prior / 2.0
    }

    /// Share of the global prior/entropy terms assigned to patch `b`.
    fn prior_weight(&self, b: usize) -> f64 {
        self.patch_members[b].len() as f64 / self.n_data()
    }

    /// Softmaxed responsibilities for each member slot of patch `b`.
    fn member_phis(&self, b: usize, phi: &ArrayView1<f64>) -> Vec<Array1<f64>> {
        self.patch_members[b]
            .iter()
            .enumerate()
            .map(|(s, _)| softmax(self.slot_logits(phi, s)))
            .collect()
    }

    fn check_inputs(&self, b: usize, phi: ArrayView1<f64>, lambda: ArrayView1<f64>) -> Result<()> {
        if b >= self.patch_members.len() {
            return Err(CoreError::IndexOutOfRange {
                index: b,
                n: self.patch_members.len(),
            });
        }
        if phi.len() != self.max_patch * self.k() {
            return Err(CoreError::DimensionMismatch {
                field: "patch logits",
                expected: self.max_patch * self.k(),
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
            return Err(CoreError::NonFinite { field: "patch logits/lambda" });
        }
        Ok(())
    }

    /// Directly-coded total objective at per-node logits: mean over data points
    /// of the pointwise terms, plus each edge once, plus the shared prior terms.
    /// Reference implementation for the decomposition identity.
    pub fn direct_objective(
        &self,
        node_alphas: &[Array1<f64>],
        lambda: ArrayView1<f64>,
    ) -> Result<f64> {
        if node_alphas.len() != self.graph.n_nodes() {
            return Err(CoreError::DimensionMismatch {
                field: "node_alphas",
                expected: self.graph.n_nodes(),
                got: node_alphas.len(),
            });
        }
        let phis: Vec<Array1<f64>> = node_alphas.iter().map(|a| softmax(a.view())).collect();
        let mut total = 0.0;
        for i in 0..self.graph.n_nodes() {
            for k in 0..self.k() {
                let p = phis[i][k].max(PHI_FLOOR);
                total += phis[i][k] * (p.ln() + self.data_cost(i, &lambda, k));
            }
            for &(l, r) in self.graph.neighbors(i) {
                total -= 0.5 * r * phis[i].dot(&phis[l]);
            }
        }
        total += self.prior_terms(&lambda);
        if self.include_constants {
            for b in 0..self.patch_members.len() {
                total += self.constant_terms(b);
            }
        }
        Ok(total / self.n_data())
    }

    /// Packs per-node logits into per-patch padded slot vectors.
    pub fn gather_patch_logits(&self, node_alphas: &[Array1<f64>]) -> Vec<Array1<f64>> {
        let mut out = vec![Array1::zeros(self.max_patch * self.k()); self.patch_members.len()];
        for (i, alpha) in node_alphas.iter().enumerate() {
            let (b, s) = self.slot_of[i];
            out[b]
                .slice_mut(s![s * self.k()..(s + 1) * self.k()])
                .assign(alpha);
        }
        out
    }

    /// Hard cluster labels per node from per-patch slot logits.
    pub fn point_labels(&self, patch_phis: &[Array1<f64>]) -> Vec<usize> {
        let mut labels = vec![0; self.graph.n_nodes()];
        for (i, &(b, s)) in self.slot_of.iter().enumerate() {
            let view = patch_phis[b].view();
            let logits = self.slot_logits(&view, s);
            let mut best = 0;
            for k in 1..self.k() {
                if logits[k] > logits[best] {
                    best = k;
                }
            }
            labels[i] = best;
        }
        labels
    }

    /// Coordinate fixed-point sweeps for the patch logits at fixed `lambda`:
    /// each node's exact update is `alpha = -cost + sum_l r phi_l`, coupled
    /// through its within-patch neighbors.
    fn optimize_patch_logits(
        &self,
        b: usize,
        lambda: ArrayView1<f64>,
        init: Option<ArrayView1<f64>>,
    ) -> Result<Array1<f64>> {
        let members = &self.patch_members[b];
        let kk = self.k();
        let mut alphas = Array1::zeros(self.max_patch * kk);
        if let Some(init) = init {
            alphas.assign(&init);
        }
        let mut phis: Vec<Array1<f64>> = (0..members.len())
            .map(|s| softmax(self.slot_logits(&alphas.view(), s)))
            .collect();
        for _ in 0..100 {
            let mut max_change: f64 = 0.0;
            for (s, &i) in members.iter().enumerate() {
                let mut logit = Array1::zeros(kk);
                for k in 0..kk {
                    logit[k] = -self.data_cost(i, &lambda, k);
                }
                for &(l, r) in self.graph.neighbors(i) {
                    let (lb, ls) = self.slot_of[l];
                    debug_assert_eq!(lb, b);
                    logit.scaled_add(r, &phis[ls]);
                }
                let mean = logit.sum() / kk as f64;
                logit -= mean;
                let new_phi = softmax(logit.view());
                for k in 0..kk {
                    max_change = max_change.max((new_phi[k] - phis[s][k]).abs());
                }
                phis[s] = new_phi;
                alphas
                    .slice_mut(s![s * kk..(s + 1) * kk])
                    .assign(&logit);
            }
            if max_change < 1e-13 {
                break;
            }
        }
        Ok(alphas)
    }
}

impl ObjectiveOracle for SpatialObjective {
    fn n_samples(&self) -> usize {
        self.patch_members.len()
    }

    fn local_dim(&self) -> usize {
        self.max_patch * self.k()
    }

    fn partition(&self) -> &BlockPartition {
        &self.partition
    }

    fn eval(&self, b: usize, phi: ArrayView1<f64>, lambda: ArrayView1<f64>) -> Result<f64> {
        self.check_inputs(b, phi, lambda)?;
        let members = &self.patch_members[b];
        let phis = self.member_phis(b, &phi);
        let mut acc = 0.0;
        for (s, &i) in members.iter().enumerate() {
            for k in 0..self.k() {
                let p = phis[s][k].max(PHI_FLOOR);
                acc += phis[s][k] * (p.ln() + self.data_cost(i, &lambda, k));
            }
            for &(l, r) in self.graph.neighbors(i) {
                let (_, ls) = self.slot_of[l];
                acc -= 0.5 * r * phis[s].dot(&phis[ls]);
            }
        }
        acc += self.prior_weight(b) * self.prior_terms(&lambda);
        if self.include_constants {
            acc += self.constant_terms(b);
        }
        Ok(self.scale() * acc)
    }

    fn grad_phi(
        &self,
        b: usize,
        phi: ArrayView1<f64>,
        lambda: ArrayView1<f64>,
    ) -> Result<Array1<f64>> {
        self.check_inputs(b, phi, lambda)?;
        let members = &self.patch_members[b];
        let kk = self.k();
        let phis = self.member_phis(b, &phi);
        let mut g = Array1::zeros(self.max_patch * kk);
        for (s, &i) in members.iter().enumerate() {
            // a_k = dF/dphi_{s,k}: entropy + data cost - Potts coupling
            let mut a = Array1::zeros(kk);
            for k in 0..kk {
                a[k] = phis[s][k].max(PHI_FLOOR).ln() + 1.0 + self.data_cost(i, &lambda, k);
            }
            for &(l, r) in self.graph.neighbors(i) {
                let (_, ls) = self.slot_of[l];
                a.scaled_add(-r, &phis[ls]);
            }
            let mean = phis[s].dot(&a);
            for k in 0..kk {
                g[s * kk + k] = self.scale() * phis[s][k] * (a[k] - mean);
            }
        }
        Ok(g)
    }

    fn grad_lambda(
        &self,
        b: usize,
        phi: ArrayView1<f64>,
        lambda: ArrayView1<f64>,
    ) -> Result<Array1<f64>> {
        self.check_inputs(b, phi, lambda)?;
        let members = &self.patch_members[b];
        let (kk, d) = (self.k(), self.d());
        let phis = self.member_phis(b, &phi);
        let w = self.prior_weight(b);
        let mut g = Array1::zeros(2 * kk * d);
        for k in 0..kk {
            for j in 0..d {
                let m = self.m_at(&lambda, k, j);
                let s2 = clipped_exp(self.rho_at(&lambda, k, j));
                let s0 = self.hyper.sigma0_sq[j];
                let s1 = self.hyper.sigma1_sq[j];
                let mut gm = w * (m - self.hyper.xi[j]) / s1;
                let mut grho = 0.5 * w * (s2 / s1 - 1.0);
                for (s, &i) in members.iter().enumerate() {
                    gm += phis[s][k] * (m - self.data[[i, j]]) / s0;
                    grho += 0.5 * phis[s][k] * s2 / s0;
                }
                g[k * d + j] = self.scale() * gm;
                g[kk * d + k * d + j] = self.scale() * grho;
            }
        }
        Ok(g)
    }

    fn optimize_phi(&self, b: usize, lambda: ArrayView1<f64>) -> Result<Array1<f64>> {
        self.optimize_patch_logits(b, lambda, None)
    }

    fn lipschitz_estimates(&self) -> Option<LipschitzEstimates> {
        let scale = self.scale();
        let mut l_m: f64 = 0.0;
        let mut l_rho: f64 = 0.0;
        for b in 0..self.patch_members.len() {
            let size = self.patch_members[b].len() as f64;
            let w = self.prior_weight(b);
            for j in 0..self.d() {
                let s0 = self.hyper.sigma0_sq[j];
                let s1 = self.hyper.sigma1_sq[j];
                l_m = l_m.max(scale * (size / s0 + w / s1));
                l_rho = l_rho.max(0.5 * scale * (size + w * s0 / s1));
            }
        }
        Some(LipschitzEstimates {
            l_phi: 1.0,
            l_lambda_blocks: vec![l_m, l_rho],
        })
    }

    fn exact_block_min(
        &self,
        b: usize,
        target: BlockTarget,
        phi: ArrayView1<f64>,
        lambda: ArrayView1<f64>,
        mu: ArrayView1<f64>,
        lambda0: ArrayView1<f64>,
        precond: &PreconditionerSpec,
    ) -> Result<Option<Array1<f64>>> {
        let (kk, d) = (self.k(), self.d());
        let members = &self.patch_members[b];
        let w = self.prior_weight(b);
        let scale = self.scale();
        let inv_etas = precond.coordinate_inv_etas(&self.partition);
        match target {
            BlockTarget::Phi => Ok(Some(self.optimize_patch_logits(b, lambda, Some(phi))?)),
            BlockTarget::Lambda(0) => {
                let phis = self.member_phis(b, &phi);
                let mut out = Array1::zeros(kk * d);
                for k in 0..kk {
                    for j in 0..d {
                        let idx = k * d + j;
                        let s0 = self.hyper.sigma0_sq[j];
                        let s1 = self.hyper.sigma1_sq[j];
                        let mut curv = scale * w / s1;
                        let mut rhs = scale * w * self.hyper.xi[j] / s1;
                        for (s, &i) in members.iter().enumerate() {
                            curv += scale * phis[s][k] / s0;
                            rhs += scale * phis[s][k] * self.data[[i, j]] / s0;
                        }
                        out[idx] = (rhs - mu[idx] + inv_etas[idx] * lambda0[idx])
                            / (curv + inv_etas[idx]);
                    }
                }
                Ok(Some(out))
            }
            BlockTarget::Lambda(1) => {
                let phis = self.member_phis(b, &phi);
                let mut out = Array1::zeros(kk * d);
                for k in 0..kk {
                    for j in 0..d {
                        let g_idx = kk * d + k * d + j;
                        let s0 = self.hyper.sigma0_sq[j];
                        let s1 = self.hyper.sigma1_sq[j];
                        let mut a = 0.5 * scale * w / s1;
                        for (s, _) in members.iter().enumerate() {
                            a += 0.5 * scale * phis[s][k] / s0;
                        }
                        let bb = -0.5 * scale * w + mu[g_idx];
                        let c = inv_etas[g_idx];
                        out[k * d + j] = solve_exp_linear(a, bb, c, lambda0[g_idx], lambda[g_idx]);
                    }
                }
                Ok(Some(out))
            }
            BlockTarget::Lambda(_) => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::central_diff_grad;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn edge_weight_hand_value() {
        // g=(1,0), displacement (1,0), x_i=x_j=(1,0), tau=0.5 -> 1 + 0.5*2 = 2
        let (r, warned) = edge_weight(
            array![1.0, 0.0].view(),
            array![0.0, 0.0].view(),
            array![1.0, 0.0].view(),
            array![1.0, 0.0].view(),
            array![1.0, 0.0].view(),
            0.5,
        );
        assert_abs_diff_eq!(r, 2.0, epsilon = 1e-14);
        assert!(!warned);
    }

    #[test]
    fn edge_weight_vanishing_cases() {
        // tau=0 and g perpendicular to the displacement -> 0
        let (r, _) = edge_weight(
            array![0.0, 1.0].view(),
            array![0.0, 0.0].view(),
            array![1.0, 0.0].view(),
            array![1.0, 0.0].view(),
            array![1.0, 0.0].view(),
            0.0,
        );
        assert_abs_diff_eq!(r, 0.0, epsilon = 1e-14);
        // opposite features (cosine -1) with tau=1 and perpendicular g -> 0
        let (r, _) = edge_weight(
            array![0.0, 1.0].view(),
            array![0.0, 0.0].view(),
            array![1.0, 0.0].view(),
            array![1.0, 0.0].view(),
            array![-1.0, 0.0].view(),
            1.0,
        );
        assert_abs_diff_eq!(r, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn edge_weight_zero_norm_warns() {
        let (r, warned) = edge_weight(
            array![0.0, 0.0].view(),
            array![0.0, 0.0].view(),
            array![1.0, 0.0].view(),
            array![0.0, 0.0].view(),
            array![1.0, 0.0].view(),
            1.0,
        );
        assert_abs_diff_eq!(r, 0.0, epsilon = 1e-14);
        assert!(warned);
    }

    fn unit_hyper(k: usize, d: usize) -> GmmHyperParams {
        GmmHyperParams {
            xi: ndarray::Array1::zeros(d),
            sigma0_sq: ndarray::Array1::ones(d),
            sigma1_sq: ndarray::Array1::ones(d),
            k,
        }
    }

    #[test]
    fn potts_isolated_node_is_zero() {
        let graph = SpatialGraph::from_edges(2, &[], None).unwrap();
        let alphas = vec![array![0.5, -0.5], array![0.0, 0.0]];
        let (v, grads) = potts_penalty_eval_grad(0, &alphas, &graph).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(grads.len(), 1);
        assert!(grads[0].1.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn potts_single_edge_hand_value() {
        // r=2, both phis ~ (1,0): per-endpoint value -1/2 * 2 * 1 = -1, total -2
        let graph = SpatialGraph::from_edges(2, &[(0, 1, 2.0)], None).unwrap();
        let alphas = vec![array![40.0, -40.0], array![40.0, -40.0]];
        let mut total = 0.0;
        for i in 0..2 {
            let (v, _) = potts_penalty_eval_grad(i, &alphas, &graph).unwrap();
            assert_abs_diff_eq!(v, -1.0, epsilon = 1e-9);
            total += v;
        }
        assert_abs_diff_eq!(total, -2.0, epsilon = 1e-9);
    }

    #[test]
    fn potts_grads_match_finite_differences() {
        let graph =
            SpatialGraph::from_edges(3, &[(0, 1, 1.3), (1, 2, 0.7), (0, 2, 2.1)], None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let alphas: Vec<ndarray::Array1<f64>> = (0..3)
            .map(|_| ndarray::Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let (_, grads) = potts_penalty_eval_grad(0, &alphas, &graph).unwrap();
        for (node, g) in grads {
            let fd = central_diff_grad(
                |a| {
                    let mut alt = alphas.clone();
                    alt[node] = a.clone();
                    potts_penalty_eval_grad(0, &alt, &graph).unwrap().0
                },
                &alphas[node],
                1e-5,
            );
            for k in 0..3 {
                let denom = g[k].abs().max(1e-3);
                assert!((g[k] - fd[k]).abs() / denom < 1e-5, "node {node} coord {k}");
            }
        }
    }

    /// 4 nodes in 2 patches of 2, a few within-patch edges, K=2, d=2.
    fn small_spatial() -> SpatialObjective {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data = Array2::from_shape_fn((4, 2), |_| rng.gen_range(-1.0..1.0));
        let graph = SpatialGraph::from_edges(
            4,
            &[(0, 1, 1.5), (2, 3, 0.8)],
            Some(vec![0, 0, 1, 1]),
        )
        .unwrap();
        SpatialObjective::new(data, unit_hyper(2, 2), &graph, false).unwrap()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let o = small_spatial();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let b = rng.gen_range(0..2);
            let phi = ndarray::Array1::from_shape_fn(4, |_| rng.gen_range(-1.0..1.0));
            let lambda = ndarray::Array1::from_shape_fn(8, |_| rng.gen_range(-1.0..1.0));
            let gp = o.grad_phi(b, phi.view(), lambda.view()).unwrap();
            let gl = o.grad_lambda(b, phi.view(), lambda.view()).unwrap();
            let fdp = central_diff_grad(|p| o.eval(b, p.view(), lambda.view()).unwrap(), &phi, 1e-5);
            let fdl =
                central_diff_grad(|l| o.eval(b, phi.view(), l.view()).unwrap(), &lambda, 1e-5);
            for k in 0..4 {
                let denom = gp[k].abs().max(1e-3);
                assert!((gp[k] - fdp[k]).abs() / denom < 1e-5);
            }
            for k in 0..8 {
                let denom = gl[k].abs().max(1e-3);
                assert!((gl[k] - fdl[k]).abs() / denom < 1e-5);
            }
        }
    }

    #[test]
    fn patch_identity_matches_direct_objective() {
        // no cross-patch edges, so the decomposed mean equals the direct total
        let o = small_spatial();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let node_alphas: Vec<ndarray::Array1<f64>> = (0..4)
            .map(|_| ndarray::Array1::from_shape_fn(2, |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let lambda = ndarray::Array1::from_shape_fn(8, |_| rng.gen_range(-1.0..1.0));
        let patch_phis = o.gather_patch_logits(&node_alphas);
        let decomposed: f64 = (0..2)
            .map(|b| o.eval(b, patch_phis[b].view(), lambda.view()).unwrap())
            .sum::<f64>()
            / 2.0;
        let direct = o.direct_objective(&node_alphas, lambda.view()).unwrap();
        assert_abs_diff_eq!(decomposed, direct, epsilon = 1e-12);
    }

    #[test]
    fn cross_patch_edges_are_dropped() {
        let graph = SpatialGraph::from_edges(
            4,
            &[(0, 1, 1.0), (1, 2, 9.0), (2, 3, 1.0)],
            Some(vec![0, 0, 1, 1]),
        )
        .unwrap();
        assert!(graph.has_cross_patch_edges());
        let restricted = graph.restrict_to_patches();
        assert!(!restricted.has_cross_patch_edges());
        assert_eq!(restricted.num_edges(), 2);
    }

    #[test]
    fn optimize_phi_is_stationary() {
        let o = small_spatial();
        let lambda = ndarray::Array1::from_shape_fn(8, |i| 0.1 * i as f64 - 0.3);
        for b in 0..2 {
            let alpha = o.optimize_phi(b, lambda.view()).unwrap();
            let g = o.grad_phi(b, alpha.view(), lambda.view()).unwrap();
            assert!(g.dot(&g).sqrt() < 1e-9, "patch {b}: {}", g.dot(&g).sqrt());
        }
    }

    #[test]
    fn exact_block_minimizers_are_stationary() {
        use crate::subsolver::al_grads;
        let o = small_spatial();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let precond = PreconditionerSpec::new(vec![0.4, 0.9]).unwrap();
        let mu = ndarray::Array1::from_shape_fn(8, |_| rng.gen_range(-0.1..0.1));
        let lambda0 = ndarray::Array1::from_shape_fn(8, |_| rng.gen_range(-0.5..0.5));
        let phi = ndarray::Array1::from_shape_fn(4, |_| rng.gen_range(-0.5..0.5));
        let mut lambda = lambda0.clone();
        for (target, range) in [(BlockTarget::Lambda(0), 0..4), (BlockTarget::Lambda(1), 4..8)] {
            let new_block = o
                .exact_block_min(
                    0,
                    target,
                    phi.view(),
                    lambda.view(),
                    mu.view(),
                    lambda0.view(),
                    &precond,
                )
                .unwrap()
                .unwrap();
            for (offset, idx) in range.enumerate() {
                lambda[idx] = new_block[offset];
            }
        }
        let (_, gl) = al_grads(&o, 0, phi.view(), lambda.view(), mu.view(), lambda0.view(), &precond)
            .unwrap();
        assert!(gl.dot(&gl).sqrt() < 1e-9, "AL lambda grad {}", gl.dot(&gl).sqrt());
    }

    #[test]
    fn padded_slots_have_zero_gradient() {
        // patches of unequal size: patch 1 has a padded slot
        let data = Array2::zeros((3, 1));
        let graph =
            SpatialGraph::from_edges(3, &[(0, 1, 1.0)], Some(vec![0, 0, 1])).unwrap();
        let o = SpatialObjective::new(data, unit_hyper(2, 1), &graph, false).unwrap();
        assert_eq!(o.local_dim(), 4);
        let phi = array![0.3, -0.3, 0.5, 0.1];
        let lambda = ndarray::Array1::zeros(4);
        let g = o.grad_phi(1, phi.view(), lambda.view()).unwrap();
        assert_eq!(g[2], 0.0);
        assert_eq!(g[3], 0.0);
    }
}
