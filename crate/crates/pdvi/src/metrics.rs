//! Evaluation metrics: diagonal-Gaussian Wasserstein distance, matched mixture
//! Wasserstein, adjusted Rand index, and the global gradient norm.

use ndarray::{Array1, Array2, ArrayView1};

use crate::consensus::{ConsensusProblem, ObjectiveOracle, SolverState};
use crate::error::{CoreError, Result};

/// Gaussian mixture with diagonal covariances, used on both sides of the
/// Wasserstein comparison.
#[derive(Debug, Clone)]
pub struct GaussianMixtureSummary {
    pub weights: Array1<f64>,
    /// K x d component means.
    pub means: Array2<f64>,
    /// K x d diagonal variances.
    pub variances: Array2<f64>,
}

impl GaussianMixtureSummary {
    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if self.means.nrows() != k || self.variances.nrows() != k {
            return Err(CoreError::DimensionMismatch {
                field: "mixture components",
                expected: k,
                got: self.means.nrows(),
            });
        }
        if self.means.ncols() != self.variances.ncols() {
            return Err(CoreError::DimensionMismatch {
                field: "mixture dims",
                expected: self.means.ncols(),
                got: self.variances.ncols(),
            });
        }
        if (self.weights.sum() - 1.0).abs() > 1e-8 || self.weights.iter().any(|&w| w < 0.0) {
            return Err(CoreError::InvalidConfig("mixture weights must be a simplex".into()));
        }
        if self.variances.iter().any(|&v| !(v > 0.0)) {
            return Err(CoreError::InvalidConfig("mixture variances must be > 0".into()));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    /// Equal-weight mixture from stacked means/variances.
    pub fn equal_weights(means: Array2<f64>, variances: Array2<f64>) -> Result<Self> {
        let k = means.nrows();
        let out = Self {
            weights: Array1::from_elem(k, 1.0 / k as f64),
            means,
            variances,
        };
        out.validate()?;
        Ok(out)
    }
}

/// 2-Wasserstein distance between diagonal Gaussians:
/// `sqrt(||m1 - m2||^2 + sum_j (sqrt(v1_j) - sqrt(v2_j))^2)`.
pub fn w2_gaussian_diag(
    mean1: ArrayView1<f64>,
    var1: ArrayView1<f64>,
    mean2: ArrayView1<f64>,
    var2: ArrayView1<f64>,
) -> Result<f64> {
    let d = mean1.len();
    if mean2.len() != d || var1.len() != d || var2.len() != d {
        return Err(CoreError::DimensionMismatch {
            field: "gaussian dims",
            expected: d,
            got: mean2.len(),
        });
    }
    if var1.iter().chain(var2.iter()).any(|&v| !(v > 0.0)) {
        return Err(CoreError::InvalidConfig("variances must be > 0".into()));
    }
    let mut acc = 0.0;
    for j in 0..d {
        let dm = mean1[j] - mean2[j];
        let ds = var1[j].sqrt() - var2[j].sqrt();
        acc += dm * dm + ds * ds;
    }
    Ok(acc.sqrt())
}

/// Minimum-cost perfect assignment on a square cost matrix (Hungarian method
/// with potentials, O(n^3)). Returns `assign[row] = column`.
pub fn hungarian(cost: &Array2<f64>) -> Result<Vec<usize>> {
    let n = cost.nrows();
    if cost.ncols() != n {
        return Err(CoreError::DimensionMismatch {
            field: "assignment cost matrix",
            expected: n,
            got: cost.ncols(),
        });
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(CoreError::NonFinite { field: "assignment costs" });
    }
    // 1-indexed potentials; p[j] = row currently matched to column j
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    Ok(assign)
}

/// Matched mixture Wasserstein: optimal component bijection on pairwise
/// squared diagonal-Gaussian W2 costs, then the square root of the weighted
/// mean of matched squared distances. Defined for equal K (and intended for
/// equal weights); an upper bound on the true mixture W2.
pub fn mixture_w2_matched(
    a: &GaussianMixtureSummary,
    b: &GaussianMixtureSummary,
) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let k = a.k();
    if b.k() != k {
        return Err(CoreError::DimensionMismatch {
            field: "mixture K",
            expected: k,
            got: b.k(),
        });
    }
    if k > 32 {
        return Err(CoreError::Unsupported("mixture matching limited to K <= 32"));
    }
    let mut cost = Array2::zeros((k, k));
    for i in 0..k {
        for j in 0..k {
            let w2 = w2_gaussian_diag(
                a.means.row(i),
                a.variances.row(i),
                b.means.row(j),
                b.variances.row(j),
            )?;
            cost[[i, j]] = w2 * w2;
        }
    }
    let assign = hungarian(&cost)?;
    let mut acc = 0.0;
    for i in 0..k {
        acc += a.weights[i] * cost[[i, assign[i]]];
    }
    Ok(acc.sqrt())
}

/// Standard adjusted Rand index from the contingency table. The degenerate
/// 0/0 case (both partitions a single cluster) is defined as 1.
pub fn adjusted_rand_index(labels_a: &[usize], labels_b: &[usize]) -> Result<f64> {
    let n = labels_a.len();
    if labels_b.len() != n {
        return Err(CoreError::DimensionMismatch {
            field: "label sequences",
            expected: n,
            got: labels_b.len(),
        });
    }
    if n < 2 {
        return Err(CoreError::InvalidConfig("ARI needs at least 2 points".into()));
    }
    let ka = labels_a.iter().max().unwrap() + 1;
    let kb = labels_b.iter().max().unwrap() + 1;
    let mut table = vec![vec![0u64; kb]; ka];
    for i in 0..n {
        table[labels_a[i]][labels_b[i]] += 1;
    }
    let choose2 = |x: u64| (x * x.saturating_sub(1)) as f64 / 2.0;
    let mut sum_ij = 0.0;
    let mut row_sums = vec![0u64; ka];
    let mut col_sums = vec![0u64; kb];
    for (i, row) in table.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            sum_ij += choose2(c);
            row_sums[i] += c;
            col_sums[j] += c;
        }
    }
    let sum_a: f64 = row_sums.iter().map(|&x| choose2(x)).sum();
    let sum_b: f64 = col_sums.iter().map(|&x| choose2(x)).sum();
    let total = choose2(n as u64);
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    if (max_index - expected).abs() < 1e-15 {
        // both partitions degenerate (single cluster): identical by convention
        return Ok(1.0);
    }
    Ok((sum_ij - expected) / (max_index - expected))
}

/// `||(1/n) sum_i grad_lambda f_i(phi_i, lambda0)||_2` at the currently held
/// local variables.
pub fn global_grad_norm<O: ObjectiveOracle>(
    problem: &ConsensusProblem<O>,
    state: &SolverState,
) -> Result<f64> {
    crate::solver::global_grad_norm_held(problem, state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn w2_identical_is_zero() {
        let m = array![1.0, -2.0];
        let v = array![0.5, 3.0];
        let w = w2_gaussian_diag(m.view(), v.view(), m.view(), v.view()).unwrap();
        assert_abs_diff_eq!(w, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn w2_unit_gaussians_shifted_by_two() {
        // N(0,1) vs N(2,1) in 1-D -> 2
        let w = w2_gaussian_diag(
            array![0.0].view(),
            array![1.0].view(),
            array![2.0].view(),
            array![1.0].view(),
        )
        .unwrap();
        assert_abs_diff_eq!(w, 2.0, epsilon = 1e-14);
    }

    #[test]
    fn w2_rejects_nonpositive_variance() {
        assert!(w2_gaussian_diag(
            array![0.0].view(),
            array![0.0].view(),
            array![0.0].view(),
            array![1.0].view(),
        )
        .is_err());
    }

    #[test]
    fn w2_matches_empirical_transport() {
        // empirical OT between sorted 1-D samples approximates W2
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..3 {
            let (m1, v1): (f64, f64) = (rng.gen_range(-2.0..2.0), rng.gen_range(0.3..2.5));
            let (m2, v2): (f64, f64) = (rng.gen_range(-2.0..2.0), rng.gen_range(0.3..2.5));
            let n = 400_000;
            let d1 = Normal::new(m1, v1.sqrt()).unwrap();
            let d2 = Normal::new(m2, v2.sqrt()).unwrap();
            let mut a: Vec<f64> = (0..n).map(|_| d1.sample(&mut rng)).collect();
            let mut b: Vec<f64> = (0..n).map(|_| d2.sample(&mut rng)).collect();
            a.sort_by(|x, y| x.partial_cmp(y).unwrap());
            b.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let emp_sq: f64 =
                a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64;
            let closed = w2_gaussian_diag(
                array![m1].view(),
                array![v1].view(),
                array![m2].view(),
                array![v2].view(),
            )
            .unwrap();
            let emp = emp_sq.sqrt();
            assert!(
                (emp - closed).abs() / closed.max(0.1) < 0.01,
                "empirical {emp} vs closed {closed}"
            );
        }
    }

    #[test]
    fn hungarian_hand_case() {
        // classic 3x3; optimal assignment cost 5: (0->1),(1->0),(2->2)
        let cost = array![[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]];
        let assign = hungarian(&cost).unwrap();
        let total: f64 = (0..3).map(|i| cost[[i, assign[i]]]).sum();
        assert_abs_diff_eq!(total, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let k = rng.gen_range(2..6);
            let cost = Array2::from_shape_fn((k, k), |_| rng.gen_range(0.0..10.0));
            let assign = hungarian(&cost).unwrap();
            let got: f64 = (0..k).map(|i| cost[[i, assign[i]]]).sum();
            // brute force over all permutations
            let mut perm: Vec<usize> = (0..k).collect();
            let mut best = f64::INFINITY;
            permute(&mut perm, 0, &mut |p| {
                let c: f64 = (0..k).map(|i| cost[[i, p[i]]]).sum();
                if c < best {
                    best = c;
                }
            });
            assert_abs_diff_eq!(got, best, epsilon = 1e-10);
        }
    }

    fn permute(p: &mut Vec<usize>, i: usize, f: &mut impl FnMut(&[usize])) {
        if i == p.len() {
            f(p);
            return;
        }
        for j in i..p.len() {
            p.swap(i, j);
            permute(p, i + 1, f);
            p.swap(i, j);
        }
    }

    fn mix(means: Vec<Vec<f64>>, vars: Vec<Vec<f64>>) -> GaussianMixtureSummary {
        let k = means.len();
        let d = means[0].len();
        GaussianMixtureSummary::equal_weights(
            Array2::from_shape_fn((k, d), |(i, j)| means[i][j]),
            Array2::from_shape_fn((k, d), |(i, j)| vars[i][j]),
        )
        .unwrap()
    }

    #[test]
    fn mixture_w2_self_is_zero() {
        let a = mix(vec![vec![0.0], vec![5.0]], vec![vec![1.0], vec![2.0]]);
        assert_abs_diff_eq!(mixture_w2_matched(&a, &a).unwrap(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn mixture_w2_permutation_invariant() {
        let a = mix(vec![vec![0.0], vec![5.0]], vec![vec![1.0], vec![2.0]]);
        let b = mix(vec![vec![5.0], vec![0.0]], vec![vec![2.0], vec![1.0]]);
        assert_abs_diff_eq!(mixture_w2_matched(&a, &b).unwrap(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn mixture_w2_hand_value() {
        // means (0,10) vs (1,10), unit variances -> sqrt((1 + 0)/2)
        let a = mix(vec![vec![0.0], vec![10.0]], vec![vec![1.0], vec![1.0]]);
        let b = mix(vec![vec![1.0], vec![10.0]], vec![vec![1.0], vec![1.0]]);
        let w = mixture_w2_matched(&a, &b).unwrap();
        assert_abs_diff_eq!(w, (0.5f64).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(w, 0.7071, epsilon = 1e-4);
    }

    #[test]
    fn mixture_w2_rejects_unequal_k() {
        let a = mix(vec![vec![0.0]], vec![vec![1.0]]);
        let b = mix(vec![vec![0.0], vec![1.0]], vec![vec![1.0], vec![1.0]]);
        assert!(mixture_w2_matched(&a, &b).is_err());
    }

    #[test]
    fn mixture_w2_triangle_inequality_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let k = rng.gen_range(1..5);
            let d = rng.gen_range(1..4);
            let draw = |rng: &mut ChaCha8Rng| {
                GaussianMixtureSummary::equal_weights(
                    Array2::from_shape_fn((k, d), |_| rng.gen_range(-3.0..3.0)),
                    Array2::from_shape_fn((k, d), |_| rng.gen_range(0.2..2.0)),
                )
                .unwrap()
            };
            let (a, b, c) = (draw(&mut rng), draw(&mut rng), draw(&mut rng));
            let ab = mixture_w2_matched(&a, &b).unwrap();
            let bc = mixture_w2_matched(&b, &c).unwrap();
            let ac = mixture_w2_matched(&a, &c).unwrap();
            assert!(ac <= ab + bc + 1e-10);
        }
    }

    #[test]
    fn ari_identical_is_one() {
        let a = vec![0, 0, 1, 1, 2, 2];
        assert_abs_diff_eq!(adjusted_rand_index(&a, &a).unwrap(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn ari_label_permutation_invariant() {
        let a = vec![0, 0, 1, 1];
        let b = vec![1, 1, 0, 0];
        assert_abs_diff_eq!(adjusted_rand_index(&a, &b).unwrap(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn ari_hand_value_negative_half() {
        // (0,0,1,1) vs (0,1,0,1) -> -0.5
        let a = vec![0, 0, 1, 1];
        let b = vec![0, 1, 0, 1];
        assert_abs_diff_eq!(adjusted_rand_index(&a, &b).unwrap(), -0.5, epsilon = 1e-14);
    }

    #[test]
    fn ari_both_single_cluster_is_one() {
        let a = vec![0, 0, 0];
        assert_abs_diff_eq!(adjusted_rand_index(&a, &a).unwrap(), 1.0, epsilon = 1e-14);
    }

    #[test]
    fn ari_rejects_length_mismatch() {
        assert!(adjusted_rand_index(&[0, 1], &[0, 1, 0]).is_err());
    }

    #[test]
    fn global_grad_norm_cancels_at_mean() {
        use crate::consensus::tests::ShiftedSquares;
        use crate::consensus::{ConsensusProblem, SolverState};
        // f_i = (lambda - a_i)^2, a = (0, 2): gradients at lambda=1 are -2 and +2
        let problem = ConsensusProblem::new(ShiftedSquares::new(vec![0.0, 2.0])).unwrap();
        let state = SolverState::new(&problem, array![1.0], None).unwrap();
        assert_abs_diff_eq!(global_grad_norm(&problem, &state).unwrap(), 0.0, epsilon = 1e-14);
    }

    proptest! {
        #[test]
        fn w2_symmetric(m1 in -5.0..5.0f64, v1 in 0.1..3.0f64, m2 in -5.0..5.0f64, v2 in 0.1..3.0f64) {
            let a = w2_gaussian_diag(array![m1].view(), array![v1].view(), array![m2].view(), array![v2].view()).unwrap();
            let b = w2_gaussian_diag(array![m2].view(), array![v2].view(), array![m1].view(), array![v1].view()).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn ari_invariant_under_relabeling(labels in proptest::collection::vec(0usize..4, 4..40)) {
            let relabeled: Vec<usize> = labels.iter().map(|&l| 3 - l).collect();
            let other: Vec<usize> = labels.iter().enumerate().map(|(i, &l)| (l + i) % 3).collect();
            let ari1 = adjusted_rand_index(&labels, &other).unwrap();
            let ari2 = adjusted_rand_index(&relabeled, &other).unwrap();
            prop_assert!((ari1 - ari2).abs() < 1e-12);
        }
    }
}
