//! Reference optimizers driving the same objectives: mini-batch SGD, SVI with
//! constant and diminishing steps, Adam, and RMSProp. Local variables are
//! re-optimized for the batch at every global step; traces share the
//! pd-solver's record schema so runs are directly comparable.

use std::time::Instant;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consensus::{ConsensusProblem, ObjectiveOracle};
use crate::error::{CoreError, Result};
use crate::solver::{sample_batch, BatchSchedule, TraceRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Sgd,
    SviConstant,
    SviDiminishing,
    Adam,
    RmsProp,
}

/// Global step size, either shared or per global block.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepSize {
    Scalar(f64),
    PerBlock(Vec<f64>),
}

impl StepSize {
    fn validate(&self, num_blocks: usize) -> Result<()> {
        let ok = match self {
            StepSize::Scalar(s) => *s > 0.0 && s.is_finite(),
            StepSize::PerBlock(v) => {
                v.len() == num_blocks && v.iter().all(|&s| s > 0.0 && s.is_finite())
            }
        };
        if ok {
            Ok(())
        } else {
            Err(CoreError::InvalidConfig(
                "step sizes must be positive (one per block when a sequence)".into(),
            ))
        }
    }

    /// Per-coordinate step vector aligned with the partition.
    fn coordinate_steps(&self, partition: &crate::consensus::BlockPartition) -> Array1<f64> {
        let mut out = Array1::zeros(partition.total_dim());
        match self {
            StepSize::Scalar(s) => out.fill(*s),
            StepSize::PerBlock(v) => {
                for (j, &s) in v.iter().enumerate() {
                    for idx in partition.block_range(j) {
                        out[idx] = s;
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct BaselineConfig {
    pub method: BaselineMethod,
    pub step: StepSize,
    /// Diminishing schedule `step_t = a / (1 + b t)`; used by SviDiminishing.
    pub diminish: (f64, f64),
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Second-moment decay for RMSProp.
    pub decay: f64,
    pub schedule: BatchSchedule,
    pub max_iters: usize,
    pub trace_every: usize,
    /// Early stop on the held-phi global gradient norm; 0 disables.
    pub stop_grad_tol: f64,
}

impl BaselineConfig {
    pub fn new(method: BaselineMethod, step: f64, schedule: BatchSchedule, max_iters: usize) -> Self {
        Self {
            method,
            step: StepSize::Scalar(step),
            diminish: (step, 0.01),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: 0.9,
            schedule,
            max_iters,
            trace_every: 100,
            stop_grad_tol: 0.0,
        }
    }

    pub fn validate<O: ObjectiveOracle>(&self, problem: &ConsensusProblem<O>) -> Result<()> {
        self.step.validate(problem.partition().num_blocks())?;
        self.schedule.validate(problem.n())?;
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(CoreError::InvalidConfig("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(0.0..1.0).contains(&self.decay) {
            return Err(CoreError::InvalidConfig("eps > 0 and decay in [0, 1) required".into()));
        }
        if self.diminish.0 <= 0.0 || self.diminish.1 < 0.0 {
            return Err(CoreError::InvalidConfig("diminish needs a > 0, b >= 0".into()));
        }
        if self.trace_every == 0 {
            return Err(CoreError::InvalidConfig("trace_every must be >= 1".into()));
        }
        Ok(())
    }
}

/// Global iterate, per-sample local variables, and optimizer moments.
#[derive(Debug, Clone)]
pub struct BaselineState {
    pub lambda0: Array1<f64>,
    pub phi: Vec<Array1<f64>>,
    pub m1: Array1<f64>,
    pub m2: Array1<f64>,
    pub t: usize,
}

impl BaselineState {
    pub fn new<O: ObjectiveOracle>(
        problem: &ConsensusProblem<O>,
        lambda0: Array1<f64>,
        init_phi: Option<&[Array1<f64>]>,
    ) -> Result<Self> {
        let d = problem.global_dim();
        if lambda0.len() != d {
            return Err(CoreError::DimensionMismatch {
                field: "lambda0",
                expected: d,
                got: lambda0.len(),
            });
        }
        let phi = match init_phi {
            Some(ps) if ps.len() == problem.n() => ps.to_vec(),
            Some(ps) => {
                return Err(CoreError::DimensionMismatch {
                    field: "init_phi",
                    expected: problem.n(),
                    got: ps.len(),
                })
            }
            None => vec![Array1::zeros(problem.local_dim()); problem.n()],
        };
        Ok(Self {
            lambda0,
            phi,
            m1: Array1::zeros(d),
            m2: Array1::zeros(d),
            t: 0,
        })
    }
}

/// One global step at iteration `t` (1-based): re-optimizes the batch's local
/// variables at the current iterate, forms the unbiased mini-batch gradient of
/// the full mean, and applies the method's update rule.
pub fn baseline_step<O: ObjectiveOracle>(
    problem: &ConsensusProblem<O>,
    config: &BaselineConfig,
    state: &mut BaselineState,
    batch: &[usize],
    t: usize,
) -> Result<()> {
    if batch.is_empty() {
        return Err(CoreError::EmptyBatch { t });
    }
    let oracle = problem.oracle();
    let lambda0 = state.lambda0.clone();

    // local re-optimization, independent across the batch
    let phis: Vec<Result<(usize, Array1<f64>)>> = batch
        .par_iter()
        .map(|&i| Ok((i, oracle.optimize_phi(i, lambda0.view())?)))
        .collect();
    for item in phis {
        let (i, phi) = item?;
        state.phi[i] = phi;
    }

    // SVI takes its natural-gradient target directly when the oracle has one
    if matches!(config.method, BaselineMethod::SviConstant | BaselineMethod::SviDiminishing) {
        let rho = svi_rho(config, t)?;
        if let Some(next) = oracle.svi_natural_update(&state.phi, &state.lambda0, batch, rho) {
            if next.iter().any(|x| !x.is_finite()) {
                return Err(CoreError::NonFinite { field: "svi update" });
            }
            state.lambda0 = next;
            state.t = t;
            return Ok(());
        }
    }

    // mini-batch gradient of the full mean: (1/m) sum_{i in S} grad f_i
    let m = batch.len() as f64;
    let mut grad = Array1::zeros(problem.global_dim());
    for &i in batch {
        grad += &oracle.grad_lambda(i, state.phi[i].view(), lambda0.view())?;
    }
    grad /= m;
    if grad.iter().any(|x| !x.is_finite()) {
        return Err(CoreError::NonFinite { field: "batch gradient" });
    }

    let steps = config.step.coordinate_steps(problem.partition());
    match config.method {
        BaselineMethod::Sgd => {
            for (idx, &g) in grad.iter().enumerate() {
                state.lambda0[idx] -= steps[idx] * g;
            }
        }
        BaselineMethod::Adam => {
            let (b1, b2) = (config.beta1, config.beta2);
            for (idx, &g) in grad.iter().enumerate() {
                state.m1[idx] = b1 * state.m1[idx] + (1.0 - b1) * g;
                state.m2[idx] = b2 * state.m2[idx] + (1.0 - b2) * g * g;
                let m_hat = state.m1[idx] / (1.0 - b1.powi(t as i32));
                let v_hat = state.m2[idx] / (1.0 - b2.powi(t as i32));
                state.lambda0[idx] -= steps[idx] * m_hat / (v_hat.sqrt() + config.eps);
            }
        }
        BaselineMethod::RmsProp => {
            for (idx, &g) in grad.iter().enumerate() {
                state.m2[idx] = config.decay * state.m2[idx] + (1.0 - config.decay) * g * g;
                state.lambda0[idx] -= steps[idx] * g / (state.m2[idx].sqrt() + config.eps);
            }
        }
        BaselineMethod::SviConstant | BaselineMethod::SviDiminishing => {
            // no conjugate closed form: plain gradient step at the SVI rate
            let rho = svi_rho(config, t)?;
            for (idx, &g) in grad.iter().enumerate() {
                state.lambda0[idx] -= rho * steps[idx] * g;
            }
        }
    }
    if state.lambda0.iter().any(|x| !x.is_finite()) {
        return Err(CoreError::NonFinite { field: "lambda0 after baseline step" });
    }
    state.t = t;
    Ok(())
}

fn svi_rho(config: &BaselineConfig, t: usize) -> Result<f64> {
    let rho = match config.method {
        BaselineMethod::SviConstant => match config.step {
            StepSize::Scalar(s) => s,
            StepSize::PerBlock(_) => {
                return Err(CoreError::Unsupported("svi uses one scalar blending step"))
            }
        },
        BaselineMethod::SviDiminishing => {
            let (a, b) = config.diminish;
            a / (1.0 + b * t as f64)
        }
        _ => unreachable!(),
    };
    if !(0.0..=1.0).contains(&rho) {
        return Err(CoreError::InvalidConfig(format!("svi step {rho} outside [0, 1]")));
    }
    Ok(rho)
}

#[derive(Debug, Clone)]
pub struct BaselineRunResult {
    pub state: BaselineState,
    pub trace: Vec<TraceRecord>,
    pub stopped_early: bool,
}

fn trace_row<O: ObjectiveOracle>(
    problem: &ConsensusProblem<O>,
    state: &BaselineState,
    started: Instant,
) -> Result<TraceRecord> {
    let oracle = problem.oracle();
    let n = problem.n();
    let mut objective = 0.0;
    let mut grad = Array1::zeros(problem.global_dim());
    for i in 0..n {
        objective += oracle.eval(i, state.phi[i].view(), state.lambda0.view())?;
        grad += &oracle.grad_lambda(i, state.phi[i].view(), state.lambda0.view())?;
    }
    objective /= n as f64;
    grad /= n as f64;
    Ok(TraceRecord {
        t: state.t,
        objective,
        grad_norm_global: grad.dot(&grad).sqrt(),
        consensus_residual: 0.0,
        wallclock_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Runs the configured baseline; mirrors the pd-solver loop and trace schema.
pub fn run_baseline<O: ObjectiveOracle>(
    problem: &ConsensusProblem<O>,
    config: &BaselineConfig,
    init_lambda0: Array1<f64>,
    init_phi: Option<&[Array1<f64>]>,
) -> Result<BaselineRunResult> {
    config.validate(problem)?;
    let mut state = BaselineState::new(problem, init_lambda0, init_phi)?;
    let started = Instant::now();
    let mut trace = Vec::new();
    let mut stopped_early = false;
    for t in 1..=config.max_iters {
        let batch = sample_batch(&config.schedule, problem.n(), t)?;
        baseline_step(problem, config, &mut state, &batch, t)?;
        if t % config.trace_every == 0 || t == config.max_iters {
            let row = trace_row(problem, &state, started)?;
            let grad_norm = row.grad_norm_global;
            trace.push(row);
            if config.stop_grad_tol > 0.0 && grad_norm <= config.stop_grad_tol {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(BaselineRunResult { state, trace, stopped_early })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::consensus::tests::ShiftedSquares;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn full_batch(n: usize) -> BatchSchedule {
        BatchSchedule::UniformWithoutReplacement { m: n, seed: 0 }
    }

    #[test]
    fn sgd_one_step_hand_value() {
        // f(lambda) = 1/2 lambda^2, step 0.1, lambda = 1 -> 0.9
        let problem = ConsensusProblem::new(ShiftedSquares::with_scale(vec![0.0], 0.5)).unwrap();
        let config = BaselineConfig::new(BaselineMethod::Sgd, 0.1, full_batch(1), 1);
        let mut state = BaselineState::new(&problem, array![1.0], None).unwrap();
        baseline_step(&problem, &config, &mut state, &[0], 1).unwrap();
        assert_abs_diff_eq!(state.lambda0[0], 0.9, epsilon = 1e-14);
    }

    #[test]
    fn diminishing_schedule_is_harmonic() {
        // a=1, b=1 -> 1/2, 1/3, 1/4, ...
        let mut config = BaselineConfig::new(BaselineMethod::SviDiminishing, 1.0, full_batch(1), 1);
        config.diminish = (1.0, 1.0);
        for t in 1..=5 {
            assert_abs_diff_eq!(svi_rho(&config, t).unwrap(), 1.0 / (1.0 + t as f64), epsilon = 1e-15);
        }
    }

    #[test]
    fn adam_first_step_magnitude() {
        // bias-corrected first step is ~step regardless of gradient scale
        for &target in &[100.0, 0.001] {
            let problem =
                ConsensusProblem::new(ShiftedSquares::with_scale(vec![target], 0.5)).unwrap();
            let config = BaselineConfig::new(BaselineMethod::Adam, 0.05, full_batch(1), 1);
            let mut state = BaselineState::new(&problem, array![0.0], None).unwrap();
            baseline_step(&problem, &config, &mut state, &[0], 1).unwrap();
            // gradient is -target; first Adam step moves +step toward it
            assert_abs_diff_eq!(state.lambda0[0], 0.05, epsilon = 1e-4);
        }
    }

    #[test]
    fn rmsprop_first_step_direction() {
        let problem = ConsensusProblem::new(ShiftedSquares::with_scale(vec![5.0], 0.5)).unwrap();
        let config = BaselineConfig::new(BaselineMethod::RmsProp, 0.01, full_batch(1), 1);
        let mut state = BaselineState::new(&problem, array![0.0], None).unwrap();
        baseline_step(&problem, &config, &mut state, &[0], 1).unwrap();
        assert!(state.lambda0[0] > 0.0);
    }

    #[test]
    fn sgd_full_batch_monotone_on_quadratic() {
        // step below 1/L keeps gradient descent monotone on a convex quadratic
        let problem =
            ConsensusProblem::new(ShiftedSquares::with_scale(vec![0.0, 2.0, 4.0], 0.5)).unwrap();
        let mut config = BaselineConfig::new(BaselineMethod::Sgd, 0.2, full_batch(3), 50);
        config.trace_every = 1;
        let result = run_baseline(&problem, &config, array![10.0], None).unwrap();
        for w in result.trace.windows(2) {
            assert!(w[1].objective <= w[0].objective + 1e-12);
        }
        assert_abs_diff_eq!(result.state.lambda0[0], 2.0, epsilon = 1e-3);
    }

    #[test]
    fn per_block_steps_respected() {
        use crate::consensus::{BlockPartition, ObjectiveOracle};
        use ndarray::ArrayView1;
        struct TwoBlock {
            partition: BlockPartition,
        }
        impl ObjectiveOracle for TwoBlock {
            fn n_samples(&self) -> usize {
                1
            }
            fn local_dim(&self) -> usize {
                0
            }
            fn partition(&self) -> &BlockPartition {
                &self.partition
            }
            fn eval(&self, _i: usize, _p: ArrayView1<f64>, l: ArrayView1<f64>) -> crate::Result<f64> {
                Ok(0.5 * l.dot(&l))
            }
            fn grad_phi(&self, _i: usize, _p: ArrayView1<f64>, _l: ArrayView1<f64>) -> crate::Result<Array1<f64>> {
                Ok(Array1::zeros(0))
            }
            fn grad_lambda(&self, _i: usize, _p: ArrayView1<f64>, l: ArrayView1<f64>) -> crate::Result<Array1<f64>> {
                Ok(l.to_owned())
            }
            fn optimize_phi(&self, _i: usize, _l: ArrayView1<f64>) -> crate::Result<Array1<f64>> {
                Ok(Array1::zeros(0))
            }
        }
        let problem = ConsensusProblem::new(TwoBlock {
            partition: BlockPartition::new(vec![1, 1]).unwrap(),
        })
        .unwrap();
        let mut config = BaselineConfig::new(BaselineMethod::Sgd, 0.1, full_batch(1), 1);
        config.step = StepSize::PerBlock(vec![0.1, 0.5]);
        let mut state = BaselineState::new(&problem, array![1.0, 1.0], None).unwrap();
        baseline_step(&problem, &config, &mut state, &[0], 1).unwrap();
        assert_abs_diff_eq!(state.lambda0[0], 0.9, epsilon = 1e-14);
        assert_abs_diff_eq!(state.lambda0[1], 0.5, epsilon = 1e-14);
    }

    #[test]
    fn run_is_deterministic() {
        let make = || {
            let problem =
                ConsensusProblem::new(ShiftedSquares::with_scale(vec![0.0, 2.0, 5.0], 0.5))
                    .unwrap();
            let mut config = BaselineConfig::new(
                BaselineMethod::Sgd,
                0.1,
                BatchSchedule::UniformWithoutReplacement { m: 2, seed: 4 },
                40,
            );
            config.trace_every = 10;
            run_baseline(&problem, &config, array![3.0], None).unwrap()
        };
        let a = make();
        let b = make();
        for (ra, rb) in a.trace.iter().zip(&b.trace) {
            assert_eq!(ra.objective.to_bits(), rb.objective.to_bits());
        }
    }

    #[test]
    fn rejects_bad_config() {
        let problem = ConsensusProblem::new(ShiftedSquares::new(vec![0.0])).unwrap();
        let mut config = BaselineConfig::new(BaselineMethod::Adam, 0.1, full_batch(1), 1);
        config.beta1 = 1.0;
        assert!(config.validate(&problem).is_err());
        let mut config = BaselineConfig::new(BaselineMethod::Sgd, -0.1, full_batch(1), 1);
        config.step = StepSize::Scalar(-0.1);
        assert!(config.validate(&problem).is_err());
    }
}
