//! Concrete per-sample objectives: strongly convex quadratic, mean-field
//! Gaussian-mixture negative ELBO, and the Potts-augmented spatial ELBO with
//! patch decomposition.

pub mod gmm;
pub mod quadratic;
pub mod spatial;

pub use gmm::{gmm_hyper_from_data, GmmHyperParams, GmmObjective};
pub use quadratic::{generate_quadratic_instance, QuadraticObjective};
pub use spatial::{edge_weight, SpatialGraph, SpatialObjective};

/// Central finite-difference gradient of `f` at `x` with step `h`.
/// Test oracle for the analytic gradients; independent of any grad code path.
pub fn central_diff_grad<F>(mut f: F, x: &ndarray::Array1<f64>, h: f64) -> ndarray::Array1<f64>
where
    F: FnMut(&ndarray::Array1<f64>) -> f64,
{
    let mut g = ndarray::Array1::zeros(x.len());
    let mut xp = x.clone();
    for j in 0..x.len() {
        let orig = xp[j];
        xp[j] = orig + h;
        let fp = f(&xp);
        xp[j] = orig - h;
        let fm = f(&xp);
        xp[j] = orig;
        g[j] = (fp - fm) / (2.0 * h);
    }
    g
}
