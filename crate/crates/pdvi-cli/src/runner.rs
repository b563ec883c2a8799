//! Builds objectives from a resolved config, drives the optimizers, and
//! writes traces, summaries, and comparison reports.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use ndarray::{Array1, Array2};
use serde::Serialize;

use pdvi::baselines::{run_baseline, BaselineConfig, BaselineMethod, StepSize};
use pdvi::consensus::{ConsensusProblem, ObjectiveOracle, PreconditionerSpec};
use pdvi::data::{
    biased_batches, build_knn_graph, partition_patches, sample_gmm, save_table, synth_spatial,
    Dataset,
};
use pdvi::metrics::{adjusted_rand_index, mixture_w2_matched, GaussianMixtureSummary};
use pdvi::objectives::gmm::{
    gmm_hyper_from_data, init_lambda_from_labels, unpack_lambda, GmmHyperParams, GmmObjective,
};
use pdvi::objectives::quadratic::generate_quadratic_instance;
use pdvi::objectives::spatial::SpatialObjective;
use pdvi::solver::{default_preconditioner, run, BatchSchedule, SolveConfig, TraceRecord};
use pdvi::subsolver::{InnerMethod, InnerSolverConfig, LineSearch};

use crate::config::{Eta, EtaRule, ExperimentConfig, ObjectiveKind, OptimizerKind};

pub const GENERATOR_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub final_objective: f64,
    pub grad_norm_global: f64,
    pub consensus_residual: f64,
    pub wallclock_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ari: Option<f64>,
    #[serde(skip)]
    pub trace: Vec<TraceRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub optimizer: &'static str,
    pub per_seed: Vec<SeedResult>,
    pub mean: SummaryStats,
    pub sd: SummaryStats,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryStats {
    pub final_objective: f64,
    pub grad_norm_global: f64,
    pub consensus_residual: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ari: Option<f64>,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn summarize(config: &ExperimentConfig, per_seed: Vec<SeedResult>) -> Summary {
    let pick = |f: fn(&SeedResult) -> f64| -> (f64, f64) {
        let values: Vec<f64> = per_seed.iter().map(f).collect();
        mean_sd(&values)
    };
    let pick_opt = |f: fn(&SeedResult) -> Option<f64>| -> (Option<f64>, Option<f64>) {
        let values: Vec<f64> = per_seed.iter().filter_map(f).collect();
        if values.len() == per_seed.len() {
            let (m, s) = mean_sd(&values);
            (Some(m), Some(s))
        } else {
            (None, None)
        }
    };
    let (obj_m, obj_s) = pick(|r| r.final_objective);
    let (grad_m, grad_s) = pick(|r| r.grad_norm_global);
    let (res_m, res_s) = pick(|r| r.consensus_residual);
    let (w2_m, w2_s) = pick_opt(|r| r.w2);
    let (ari_m, ari_s) = pick_opt(|r| r.ari);
    Summary {
        optimizer: config.optimizer.name(),
        mean: SummaryStats {
            final_objective: obj_m,
            grad_norm_global: grad_m,
            consensus_residual: res_m,
            w2: w2_m,
            ari: ari_m,
        },
        sd: SummaryStats {
            final_objective: obj_s,
            grad_norm_global: grad_s,
            consensus_residual: res_s,
            w2: w2_s,
            ari: ari_s,
        },
        per_seed,
        config: config.clone(),
    }
}

/// Synthetic GMM generating distribution for the gmm presets.
fn generating_hyper(k: usize, d: usize) -> GmmHyperParams {
    GmmHyperParams {
        xi: Array1::zeros(d),
        sigma0_sq: Array1::ones(d),
        sigma1_sq: Array1::from_elem(d, 25.0),
        k,
    }
}

pub fn build_dataset(config: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    if let Some(path) = &config.dataset.path {
        return pdvi::data::load_table(path)
            .with_context(|| format!("loading dataset {}", path.display()));
    }
    let spec = &config.dataset;
    match config.objective {
        ObjectiveKind::Quadratic => bail!("quadratic instances are regenerated from the seed; they have no table form"),
        ObjectiveKind::Gmm => {
            Ok(sample_gmm(spec.n, &generating_hyper(spec.k, spec.d), seed)?)
        }
        ObjectiveKind::Spatial => Ok(synth_spatial(spec.n_side, spec.k, spec.d, seed)?),
    }
}

fn batch_schedule(
    config: &ExperimentConfig,
    n: usize,
    labels: Option<&[usize]>,
    seed: u64,
) -> Result<BatchSchedule> {
    let m = config.solver.batch_size.min(n);
    if config.dataset.bias > 0.0 {
        let labels =
            labels.ok_or_else(|| anyhow!("biased batches require a dataset with labels"))?;
        let (batches, _) = biased_batches(labels, m, config.dataset.bias, seed)?;
        Ok(BatchSchedule::CustomSequence { batches })
    } else {
        Ok(BatchSchedule::UniformWithoutReplacement { m, seed })
    }
}

fn resolve_preconditioner<O: ObjectiveOracle>(
    config: &ExperimentConfig,
    problem: &ConsensusProblem<O>,
) -> Result<PreconditionerSpec> {
    let num_blocks = problem.partition().num_blocks();
    if let Some(eta) = &config.solver.eta {
        return Ok(match eta {
            Eta::Scalar(e) => PreconditionerSpec::uniform(*e, num_blocks)?,
            Eta::PerBlock(v) => {
                if v.len() != num_blocks {
                    bail!("eta list has {} entries, objective has {num_blocks} blocks", v.len());
                }
                PreconditionerSpec::new(v.clone())?
            }
        });
    }
    let lipschitz = problem
        .oracle()
        .lipschitz_estimates()
        .ok_or_else(|| anyhow!("objective provides no Lipschitz estimates; set solver.eta"))?
        .l_lambda_blocks;
    match config.resolved_eta_rule() {
        EtaRule::Uniform => {
            let l_max = lipschitz.iter().cloned().fold(f64::MIN, f64::max);
            Ok(PreconditionerSpec::uniform(config.solver.c / l_max, num_blocks)?)
        }
        EtaRule::InvLipschitz => Ok(default_preconditioner(&lipschitz, config.solver.c)?.0),
    }
}

struct DriveOutput {
    trace: Vec<TraceRecord>,
    lambda0: Array1<f64>,
    phi: Vec<Array1<f64>>,
}

fn drive<O: ObjectiveOracle>(
    config: &ExperimentConfig,
    problem: &ConsensusProblem<O>,
    init: Array1<f64>,
    schedule: BatchSchedule,
    inner_method: InnerMethod,
) -> Result<DriveOutput> {
    if config.optimizer.is_primal_dual() {
        let solve_config = SolveConfig {
            preconditioner: resolve_preconditioner(config, problem)?,
            schedule,
            max_iters: config.solver.iters,
            inner: InnerSolverConfig {
                method: inner_method,
                inner_tol: config.solver.inner_tol,
                max_inner_iters: config.solver.max_inner_iters,
                line_search: LineSearch::Backtracking,
            },
            stop_grad_tol: 0.0,
            trace_every: config.solver.trace_every,
            check_identities: config.solver.check_identities,
        };
        let result = run(problem, &solve_config, init, None)?;
        Ok(DriveOutput {
            trace: result.trace,
            lambda0: result.state.lambda0,
            phi: result.state.phi,
        })
    } else {
        let method = match config.optimizer {
            OptimizerKind::Sgd => BaselineMethod::Sgd,
            OptimizerKind::SviConstant => BaselineMethod::SviConstant,
            OptimizerKind::SviDiminishing => BaselineMethod::SviDiminishing,
            OptimizerKind::Adam => BaselineMethod::Adam,
            OptimizerKind::Rmsprop => BaselineMethod::RmsProp,
            _ => unreachable!(),
        };
        let b = &config.baseline;
        let mut baseline_config =
            BaselineConfig::new(method, b.step, schedule, config.solver.iters);
        baseline_config.step = StepSize::Scalar(b.step);
        baseline_config.diminish = (b.diminish_a, b.diminish_b);
        baseline_config.beta1 = b.beta1;
        baseline_config.beta2 = b.beta2;
        baseline_config.eps = b.eps;
        baseline_config.decay = b.decay;
        baseline_config.trace_every = config.solver.trace_every;
        let result = run_baseline(problem, &baseline_config, init, None)?;
        Ok(DriveOutput {
            trace: result.trace,
            lambda0: result.state.lambda0,
            phi: result.state.phi,
        })
    }
}

fn seed_result_from(
    seed: u64,
    trace: Vec<TraceRecord>,
    w2: Option<f64>,
    ari: Option<f64>,
) -> Result<SeedResult> {
    let last = trace.last().ok_or_else(|| anyhow!("empty trace"))?.clone();
    Ok(SeedResult {
        seed,
        final_objective: last.objective,
        grad_norm_global: last.grad_norm_global,
        consensus_residual: last.consensus_residual,
        wallclock_ms: last.wallclock_ms,
        w2,
        ari,
        trace,
    })
}

fn mixture_from_lambda(
    lambda0: &Array1<f64>,
    k: usize,
    d: usize,
    sigma0_sq: &Array1<f64>,
) -> Result<GaussianMixtureSummary> {
    let (means, _) = unpack_lambda(&lambda0.view(), k, d);
    let variances = Array2::from_shape_fn((k, d), |(_, j)| sigma0_sq[j]);
    Ok(GaussianMixtureSummary::equal_weights(means, variances)?)
}

pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedResult> {
    match config.objective {
        ObjectiveKind::Quadratic => {
            let spec = &config.dataset;
            if spec.path.is_some() {
                bail!("quadratic objective is synthetic-only; remove dataset.path");
            }
            if spec.bias > 0.0 {
                bail!("biased batches need labels; the quadratic objective has none");
            }
            let oracle = generate_quadratic_instance(
                spec.n, spec.d_phi, spec.d_lambda, spec.cond, seed,
            )?;
            let problem = ConsensusProblem::new(oracle)?;
            let schedule = batch_schedule(config, spec.n, None, seed)?;
            let init = Array1::from_elem(spec.d_lambda, 1.0);
            let out = drive(config, &problem, init, schedule, InnerMethod::ClosedForm)?;
            seed_result_from(seed, out.trace, None, None)
        }
        ObjectiveKind::Gmm => {
            let dataset = build_dataset(config, seed)?;
            let k = config.dataset.k;
            let (hyper, km_labels) = gmm_hyper_from_data(&dataset.x, k, seed)?;
            let init = init_lambda_from_labels(&dataset.x, &km_labels, &hyper)?;
            let d = dataset.d();
            let sigma0_sq = hyper.sigma0_sq.clone();
            let oracle = GmmObjective::new(dataset.x.clone(), hyper, false)?;
            let problem = ConsensusProblem::new(oracle)?;
            let schedule =
                batch_schedule(config, dataset.n(), dataset.true_labels.as_deref(), seed)?;
            let out = drive(config, &problem, init, schedule, InnerMethod::BlockCoordinateDescent)?;
            let w2 = match &dataset.true_mixture {
                Some(truth) => Some(mixture_w2_matched(
                    &mixture_from_lambda(&out.lambda0, k, d, &sigma0_sq)?,
                    truth,
                )?),
                None => None,
            };
            let ari = match &dataset.true_labels {
                Some(truth) => {
                    let oracle = problem.oracle();
                    let mut predicted = Vec::with_capacity(dataset.n());
                    for i in 0..dataset.n() {
                        let alpha = oracle.optimize_phi(i, out.lambda0.view())?;
                        let best = alpha
                            .iter()
                            .enumerate()
                            .max_by(|a, b| a.1.total_cmp(b.1))
                            .map(|(idx, _)| idx)
                            .unwrap_or(0);
                        predicted.push(best);
                    }
                    Some(adjusted_rand_index(truth, &predicted)?)
                }
                None => None,
            };
            seed_result_from(seed, out.trace, w2, ari)
        }
        ObjectiveKind::Spatial => {
            let dataset = build_dataset(config, seed)?;
            let coords = dataset
                .coords
                .clone()
                .ok_or_else(|| anyhow!("spatial objective needs cx,cy coordinates"))?;
            let spec = &config.dataset;
            let patches = partition_patches(&coords, spec.target_patches)?;
            let graph =
                build_knn_graph(&coords, spec.knn_k, None, &dataset.x, spec.tau, Some(patches))?;
            let (hyper, km_labels) = gmm_hyper_from_data(&dataset.x, spec.k, seed)?;
            let init = init_lambda_from_labels(&dataset.x, &km_labels, &hyper)?;
            let oracle = SpatialObjective::new(dataset.x.clone(), hyper, &graph, false)?;
            let problem = ConsensusProblem::new(oracle)?;
            if spec.bias > 0.0 {
                bail!("biased batches are per-point; the spatial objective samples patches");
            }
            let schedule = batch_schedule(config, problem.n(), None, seed)?;
            let out = drive(config, &problem, init, schedule, InnerMethod::BlockCoordinateDescent)?;
            let ari = match &dataset.true_labels {
                Some(truth) => {
                    // re-optimize every patch at the final global iterate so
                    // labels do not depend on which patches a run visited
                    let oracle = problem.oracle();
                    let mut phis = out.phi.clone();
                    for (b, phi) in phis.iter_mut().enumerate() {
                        *phi = oracle.optimize_phi(b, out.lambda0.view())?;
                    }
                    Some(adjusted_rand_index(truth, &oracle.point_labels(&phis))?)
                }
                None => None,
            };
            seed_result_from(seed, out.trace, None, ari)
        }
    }
}

fn config_comment_block(config: &ExperimentConfig) -> Result<String> {
    let toml = config.to_toml()?;
    let mut out = String::from("# resolved configuration\n");
    for line in toml.lines() {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_trace(path: &Path, config: &ExperimentConfig, trace: &[TraceRecord]) -> Result<()> {
    let mut file = std::io::BufWriter::new(
        std::fs::File::create(path).with_context(|| format!("create {}", path.display()))?,
    );
    file.write_all(config_comment_block(config)?.as_bytes())?;
    writeln!(file, "t,objective,grad_norm_global,consensus_residual,wallclock_ms")?;
    for row in trace {
        writeln!(
            file,
            "{},{},{},{},{}",
            row.t, row.objective, row.grad_norm_global, row.consensus_residual, row.wallclock_ms
        )?;
    }
    Ok(())
}

pub fn cmd_run(config: &ExperimentConfig) -> Result<Summary> {
    std::fs::create_dir_all(&config.output_dir)
        .with_context(|| format!("create {}", config.output_dir.display()))?;
    let mut per_seed = Vec::new();
    for &seed in &config.seeds {
        let result = run_seed(config, seed)?;
        let trace_path = config
            .output_dir
            .join(format!("trace_{}_seed{}.csv", config.optimizer.name(), seed));
        write_trace(&trace_path, config, &result.trace)?;
        eprintln!(
            "seed {seed}: objective {:.6e}, grad {:.3e} -> {}",
            result.final_objective,
            result.grad_norm_global,
            trace_path.display()
        );
        per_seed.push(result);
    }
    let summary = summarize(config, per_seed);
    let summary_path = config
        .output_dir
        .join(format!("summary_{}.json", config.optimizer.name()));
    let file = std::fs::File::create(&summary_path)
        .with_context(|| format!("create {}", summary_path.display()))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &summary)?;
    eprintln!("summary -> {}", summary_path.display());
    Ok(summary)
}

pub fn cmd_gen(config: &ExperimentConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(&config.output_dir)
        .with_context(|| format!("create {}", config.output_dir.display()))?;
    let seed = config.seeds[0];
    let meta_path = config.output_dir.join("dataset.meta.toml");
    let data_path = config.output_dir.join("dataset.csv");
    let mut meta = String::new();
    meta.push_str(&format!("seed = {seed}\n"));
    meta.push_str(&format!(
        "preset = \"{}\"\n",
        config.preset.as_deref().unwrap_or("none")
    ));
    meta.push_str(&format!("generator_version = \"{GENERATOR_VERSION}\"\n"));
    if config.objective == ObjectiveKind::Quadratic {
        // synthetic quadratic instances have no table form; runs regenerate
        // them from the seed (optimum value 0 by construction)
        meta.push_str("regenerated_from_seed = true\n");
        meta.push_str("optimum_objective = 0.0\n");
    } else {
        let dataset = build_dataset(config, seed)?;
        save_table(&dataset, &data_path)?;
        eprintln!("dataset -> {}", data_path.display());
    }
    meta.push('\n');
    meta.push_str(&config_comment_block(config)?);
    std::fs::write(&meta_path, meta)?;
    eprintln!("metadata -> {}", meta_path.display());
    Ok(data_path)
}

pub fn cmd_compare(configs: &[ExperimentConfig], out: Option<&Path>) -> Result<String> {
    if configs.len() < 2 {
        bail!("compare needs at least two configs");
    }
    let first = &configs[0];
    for other in &configs[1..] {
        if other.objective != first.objective
            || other.dataset != first.dataset
            || other.seeds != first.seeds
        {
            bail!("compare refused: configs disagree on dataset, objective, or seeds");
        }
    }
    let summaries: Vec<Summary> = configs.iter().map(cmd_run).collect::<Result<_>>()?;
    let names: Vec<&str> = summaries.iter().map(|s| s.optimizer).collect();

    let mut report = String::new();
    let mut wins: Vec<usize> = vec![0; summaries.len()];
    let metrics: [(&str, fn(&SeedResult) -> Option<f64>, bool); 4] = [
        ("final_objective", |r| Some(r.final_objective), true),
        ("grad_norm_global", |r| Some(r.grad_norm_global), true),
        ("w2", |r| r.w2, true),
        ("ari", |r| r.ari, false),
    ];
    for (metric, get, lower_is_better) in metrics {
        if summaries.iter().any(|s| s.per_seed.iter().any(|r| get(r).is_none())) {
            continue;
        }
        report.push_str(&format!("\nmetric: {metric}\n"));
        report.push_str(&format!("{:>8}", "seed"));
        for name in &names {
            report.push_str(&format!("{name:>18}"));
        }
        report.push('\n');
        for (si, &seed) in first.seeds.iter().enumerate() {
            report.push_str(&format!("{seed:>8}"));
            let values: Vec<f64> =
                summaries.iter().map(|s| get(&s.per_seed[si]).unwrap()).collect();
            for v in &values {
                report.push_str(&format!("{v:>18.6e}"));
            }
            report.push('\n');
            if metric == "final_objective" {
                let best = (0..values.len())
                    .min_by(|&a, &b| {
                        let (x, y) = if lower_is_better {
                            (values[a], values[b])
                        } else {
                            (-values[a], -values[b])
                        };
                        x.total_cmp(&y)
                    })
                    .unwrap();
                wins[best] += 1;
            }
        }
        report.push_str("mean    ");
        for s in &summaries {
            let values: Vec<f64> = s.per_seed.iter().map(|r| get(r).unwrap()).collect();
            let (m, sd) = mean_sd(&values);
            report.push_str(&format!("{:>18}", format!("{m:.4e}±{sd:.1e}")));
        }
        report.push('\n');
    }
    report.push_str("\nwin counts (final objective): ");
    for (name, w) in names.iter().zip(&wins) {
        report.push_str(&format!("{name}={w} "));
    }
    report.push('\n');

    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        #[derive(Serialize)]
        struct CompareFile<'a> {
            report: &'a str,
            summaries: &'a [Summary],
        }
        let path = dir.join("comparison.json");
        let file = std::fs::File::create(&path)?;
        serde_json::to_writer_pretty(
            std::io::BufWriter::new(file),
            &CompareFile { report: &report, summaries: &summaries },
        )?;
        eprintln!("comparison -> {}", path.display());
    }
    Ok(report)
}
