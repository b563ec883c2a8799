mod config;
mod runner;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::{Eta, ExperimentConfig};

#[derive(Parser)]
#[command(name = "pdvi", version, about = "Consensus primal-dual VI experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default, Clone)]
struct Overrides {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset: quad-desk | quad-full | gmm-desk | gmm-full | spatial-desk.
    #[arg(long)]
    preset: Option<String>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// pdvi | p2dvi | sgd | svi_constant | svi_diminishing | adam | rmsprop.
    #[arg(long)]
    optimizer: Option<String>,
    /// Explicit eta: one value, or one per global block.
    #[arg(long, value_delimiter = ',')]
    eta: Option<Vec<f64>>,
    /// uniform | inv-lipschitz.
    #[arg(long)]
    eta_rule: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset plus its metadata sidecar.
    Gen(Overrides),
    /// Run the configured optimizer; write per-seed traces and a summary.
    Run(Overrides),
    /// Run several configs on the same dataset and report paired metrics.
    Compare {
        /// Config files; must agree on objective, dataset, and seeds.
        configs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the fully resolved config as TOML.
    PrintConfig(Overrides),
}

fn resolve(overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut config = match &overrides.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(preset) = &overrides.preset {
        config.apply_preset(preset)?;
    }
    if let Some(seeds) = &overrides.seed {
        config.seeds = seeds.clone();
    }
    if let Some(out) = &overrides.out {
        config.output_dir = out.clone();
    }
    if let Some(optimizer) = &overrides.optimizer {
        config.optimizer = optimizer.parse()?;
    }
    if let Some(eta) = &overrides.eta {
        config.solver.eta = Some(if eta.len() == 1 {
            Eta::Scalar(eta[0])
        } else {
            Eta::PerBlock(eta.clone())
        });
    }
    if let Some(rule) = &overrides.eta_rule {
        config.solver.eta_rule = Some(rule.parse()?);
    }
    if let Some(batch_size) = overrides.batch_size {
        config.solver.batch_size = batch_size;
    }
    if let Some(iters) = overrides.iters {
        config.solver.iters = iters;
    }
    config.validate()?;
    Ok(config)
}

fn init_thread_pool() {
    if let Ok(value) = std::env::var("PDVI_THREADS") {
        if let Ok(threads) = value.parse::<usize>() {
            if threads >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
            }
        }
    }
}

fn main() {
    init_thread_pool();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Gen(overrides) => resolve(overrides).and_then(|c| runner::cmd_gen(&c).map(|_| ())),
        Command::Run(overrides) => {
            resolve(overrides).and_then(|c| runner::cmd_run(&c).map(|_| ()))
        }
        Command::Compare { configs, out } => (|| {
            let configs: Vec<ExperimentConfig> = configs
                .iter()
                .map(|p| ExperimentConfig::load(p))
                .collect::<Result<_>>()?;
            let report = runner::cmd_compare(&configs, out.as_deref())?;
            print!("{report}");
            Ok(())
        })(),
        Command::PrintConfig(overrides) => resolve(overrides).and_then(|c| {
            print!("{}", c.to_toml()?);
            Ok(())
        }),
    };
    if let Err(err) = outcome {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
