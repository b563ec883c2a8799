//! Experiment configuration: TOML file, presets, and flag overrides.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Quadratic,
    Gmm,
    Spatial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Pdvi,
    P2dvi,
    Sgd,
    SviConstant,
    SviDiminishing,
    Adam,
    Rmsprop,
}

impl OptimizerKind {
    pub fn is_primal_dual(self) -> bool {
        matches!(self, OptimizerKind::Pdvi | OptimizerKind::P2dvi)
    }

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Pdvi => "pdvi",
            OptimizerKind::P2dvi => "p2dvi",
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::SviConstant => "svi_constant",
            OptimizerKind::SviDiminishing => "svi_diminishing",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Rmsprop => "rmsprop",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pdvi" => OptimizerKind::Pdvi,
            "p2dvi" => OptimizerKind::P2dvi,
            "sgd" => OptimizerKind::Sgd,
            "svi_constant" => OptimizerKind::SviConstant,
            "svi_diminishing" => OptimizerKind::SviDiminishing,
            "adam" => OptimizerKind::Adam,
            "rmsprop" => OptimizerKind::Rmsprop,
            other => bail!("unknown optimizer '{other}'"),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EtaRule {
    Uniform,
    InvLipschitz,
}

impl std::str::FromStr for EtaRule {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "uniform" => EtaRule::Uniform,
            "inv-lipschitz" => EtaRule::InvLipschitz,
            other => bail!("unknown eta rule '{other}' (expected uniform | inv-lipschitz)"),
        })
    }
}

/// Explicit step size: a scalar shared by all global blocks or one per block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Eta {
    Scalar(f64),
    PerBlock(Vec<f64>),
}

/// Dataset source: an on-disk table or a seeded synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub path: Option<PathBuf>,
    pub n: usize,
    pub d: usize,
    pub k: usize,
    /// Grid side for the spatial generator (n = n_side^2).
    pub n_side: usize,
    pub cond: f64,
    pub d_phi: usize,
    pub d_lambda: usize,
    /// Biased-batch intensity in [0, 1); 0 means uniform sampling.
    pub bias: f64,
    pub knn_k: usize,
    pub tau: f64,
    pub target_patches: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            path: None,
            n: 10_000,
            d: 10,
            k: 5,
            n_side: 20,
            cond: 1000.0,
            d_phi: 5,
            d_lambda: 5,
            bias: 0.0,
            knn_k: 6,
            tau: 0.5,
            target_patches: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverBlock {
    /// Explicit eta; when absent the rule below derives it from Lipschitz bounds.
    pub eta: Option<Eta>,
    /// Defaults to uniform for pdvi, inv-lipschitz for p2dvi.
    pub eta_rule: Option<EtaRule>,
    /// Safety factor c in eta_j = c / L_j.
    pub c: f64,
    pub batch_size: usize,
    pub iters: usize,
    pub inner_tol: f64,
    pub max_inner_iters: usize,
    pub trace_every: usize,
    pub check_identities: bool,
}

impl Default for SolverBlock {
    fn default() -> Self {
        Self {
            eta: None,
            eta_rule: None,
            c: 0.5,
            batch_size: 100,
            iters: 600,
            inner_tol: 1e-7,
            max_inner_iters: 200,
            trace_every: 50,
            check_identities: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineBlock {
    pub step: f64,
    pub diminish_a: f64,
    pub diminish_b: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay: f64,
}

impl Default for BaselineBlock {
    fn default() -> Self {
        Self {
            step: 0.1,
            diminish_a: 1.0,
            diminish_b: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub objective: ObjectiveKind,
    pub optimizer: OptimizerKind,
    pub preset: Option<String>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub solver: SolverBlock,
    pub baseline: BaselineBlock,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveKind::Gmm,
            optimizer: OptimizerKind::P2dvi,
            preset: None,
            seeds: vec![1],
            output_dir: PathBuf::from("out"),
            dataset: DatasetSpec::default(),
            solver: SolverBlock::default(),
            baseline: BaselineBlock::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let config: Self = toml::from_str(&text)
            .with_context(|| format!("config parse error in {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        match name {
            "quad-desk" | "quad-full" => {
                self.objective = ObjectiveKind::Quadratic;
                self.dataset.d_phi = 5;
                self.dataset.d_lambda = 5;
                self.dataset.cond = 1000.0;
                if name == "quad-desk" {
                    self.dataset.n = 200;
                    self.solver.batch_size = 20;
                } else {
                    self.dataset.n = 10_000;
                    self.solver.batch_size = 200;
                }
                self.solver.iters = 2000;
                self.solver.trace_every = 10;
            }
            "gmm-desk" | "gmm-full" => {
                self.objective = ObjectiveKind::Gmm;
                self.dataset.k = 5;
                self.dataset.d = 10;
                if name == "gmm-desk" {
                    self.dataset.n = 10_000;
                    self.solver.batch_size = 100;
                } else {
                    self.dataset.n = 100_000;
                    self.solver.batch_size = 1000;
                }
                self.solver.iters = 600;
            }
            "spatial-desk" => {
                self.objective = ObjectiveKind::Spatial;
                self.dataset.n_side = 20;
                self.dataset.k = 4;
                self.dataset.d = 3;
                self.dataset.target_patches = 16;
                self.solver.batch_size = 8;
                self.solver.iters = 100;
            }
            other => bail!(
                "unknown preset '{other}' (expected quad-desk | quad-full | gmm-desk | gmm-full | spatial-desk)"
            ),
        }
        self.preset = Some(name.to_string());
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("seeds must be non-empty");
        }
        if let Some(path) = &self.dataset.path {
            if !path.exists() {
                bail!("dataset path {} does not exist", path.display());
            }
        }
        if self.solver.batch_size == 0 || self.solver.iters == 0 {
            bail!("batch_size and iters must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dataset.bias) {
            bail!("dataset.bias must be in [0, 1)");
        }
        match &self.solver.eta {
            Some(Eta::Scalar(e)) if !(*e > 0.0) => bail!("eta must be > 0"),
            Some(Eta::PerBlock(v)) if v.iter().any(|&e| !(e > 0.0)) => {
                bail!("all eta entries must be > 0")
            }
            _ => {}
        }
        Ok(())
    }

    pub fn resolved_eta_rule(&self) -> EtaRule {
        self.solver.eta_rule.unwrap_or(match self.optimizer {
            OptimizerKind::P2dvi => EtaRule::InvLipschitz,
            _ => EtaRule::Uniform,
        })
    }

    /// Rendered TOML for provenance blocks in output files.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serialize resolved config")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let config = ExperimentConfig::default();
        let text = config.to_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn preset_sets_dimensions() {
        let mut config = ExperimentConfig::default();
        config.apply_preset("quad-desk").unwrap();
        assert_eq!(config.objective, ObjectiveKind::Quadratic);
        assert_eq!(config.dataset.n, 200);
        assert_eq!(config.solver.batch_size, 20);
        config.apply_preset("gmm-desk").unwrap();
        assert_eq!(config.dataset.n, 10_000);
        assert!(config.apply_preset("nope").is_err());
    }

    #[test]
    fn eta_accepts_scalar_and_list() {
        let a: ExperimentConfig = toml::from_str("[solver]\neta = 0.5\n").unwrap();
        assert_eq!(a.solver.eta, Some(Eta::Scalar(0.5)));
        let b: ExperimentConfig = toml::from_str("[solver]\neta = [0.5, 1.0]\n").unwrap();
        assert_eq!(b.solver.eta, Some(Eta::PerBlock(vec![0.5, 1.0])));
    }

    #[test]
    fn rejects_empty_seeds() {
        let config: ExperimentConfig = toml::from_str("seeds = []\n").unwrap();
        assert!(config.validate().is_err());
    }
}
