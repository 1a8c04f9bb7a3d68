use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use downscale::experiment::{
    cmd_compare, cmd_downscale, cmd_evaluate, cmd_synth, cmd_train, evaluated_methods, run_pipeline, ExperimentConfig,
    Method,
};

/// Statistical downscaling of daily precipitation: synthetic data, seasonal
/// training, test-period projection, evaluation and method comparison.
#[derive(Parser, Debug)]
#[command(name = "downscale", version, about)]
struct Cli {
    /// JSON experiment configuration; missing keys take their defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// downscaling method (bcsd, pcaols, pcasvr, elnet, mssl, bcsd-mssl, cnn)
    #[arg(long, global = true)]
    method: Option<Method>,

    /// seed for data synthesis and network training
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// log progress to stderr
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic dataset to the data directory
    Synth,
    /// Fit one model per season on the training years
    Train,
    /// Project the test years with the trained seasonal models
    Downscale,
    /// Score the projection against the test-year observations
    Evaluate,
    /// Merge evaluation summaries into one table
    Compare {
        /// methods to compare; defaults to every evaluated method
        methods: Vec<Method>,
    },
    /// Synthesize data, then train, downscale and evaluate every method and compare
    Run,
    /// Print the effective configuration as JSON
    Config,
}

impl Cli {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.config()?;
    match &cli.command {
        Command::Synth => {
            let dir = cmd_synth(&cfg)?;
            println!("{}", dir.display());
        }
        Command::Train => {
            let out = cmd_train(&cfg).with_context(|| format!("training {}", cfg.method))?;
            for s in &out.log.seasons {
                let flag = match s.solver_converged {
                    Some(false) => " (solver did not converge)",
                    _ => "",
                };
                println!(
                    "{} {}: {} training days{flag}",
                    cfg.method,
                    s.season.label(),
                    s.train_days
                );
            }
            println!(
                "audit: {} dates checked, {} in test years",
                out.audit.dates_checked, out.audit.test_dates
            );
            println!("{}", out.models_dir.display());
        }
        Command::Downscale => {
            let out = cmd_downscale(&cfg).with_context(|| format!("downscaling with {}", cfg.method))?;
            println!("{}", out.projection.display());
            println!("{}", out.provenance.display());
        }
        Command::Evaluate => {
            let out = cmd_evaluate(&cfg).with_context(|| format!("evaluating {}", cfg.method))?;
            for p in [&out.eval_csv, &out.climdex_csv, &out.summary] {
                println!("{}", p.display());
            }
        }
        Command::Compare { methods } => {
            let methods = if methods.is_empty() {
                evaluated_methods(&cfg)
            } else {
                methods.clone()
            };
            if methods.len() < 2 {
                bail!(
                    "comparison needs at least two evaluated methods, found {}",
                    methods.len()
                );
            }
            println!("{}", cmd_compare(&cfg, &methods)?.display());
        }
        Command::Run => {
            let out = run_pipeline(&cfg)?;
            for (m, a) in &out.audits {
                println!("{m}: {} dates checked, {} in test years", a.dates_checked, a.test_dates);
            }
            println!("{}", out.compare.display());
        }
        Command::Config => {
            println!("{}", serde_json::to_string_pretty(&cfg)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn compare_takes_method_names() {
        let cli = Cli::try_parse_from(["downscale", "compare", "elnet", "BCSD-MSSL"]).unwrap();
        match cli.command {
            Command::Compare { methods } => assert_eq!(methods, vec![Method::Elnet, Method::BcsdMssl]),
            other => panic!("parsed {other:?}"),
        }
    }

    #[test]
    fn defaults_apply_without_config() {
        let cli = Cli::try_parse_from(["downscale", "config", "--seed", "3"]).unwrap();
        let cfg = cli.config().unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.method, ExperimentConfig::default().method);
    }
}
