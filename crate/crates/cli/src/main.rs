use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::warn;
use serde_json::json;
use urs_core::config::{DataConfig, RunConfig};
use urs_core::pipeline::{self, Checkpoint};
use urs_core::{Error, Exec, Result};

#[derive(Parser)]
#[command(
    name = "urs",
    version,
    about = "Unscented reservoir smoother: simulate, train, forecast, evaluate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic CIR dataset and a market-schema fixture of it.
    Simulate(Common),
    /// Generalized-EM training; writes checkpoint.json and trajectory.csv.
    TrainOffline(Common),
    /// Joint-UKF training; writes checkpoint.json and trajectory.csv.
    TrainOnline(Common),
    /// Multi-step forecast of the test segment from a checkpoint.
    Forecast {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Rolling-origin evaluation of a checkpoint, or a multi-seed synthetic
    /// experiment when no checkpoint is given.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "seeds")]
        checkpoint: Option<PathBuf>,
        /// Number of consecutive seeds to train and evaluate.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads (0 uses all cores, 1 runs sequentially).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Synthetic bundle directory written by `simulate`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Option quotes table (date, expiration, strike, best_bid, best_offer, volume).
    #[arg(long)]
    options: Option<PathBuf>,
    /// Spot table (date, close).
    #[arg(long)]
    spot: Option<PathBuf>,
    /// Rate table (date, rate).
    #[arg(long)]
    rates: Option<PathBuf>,
    /// Quotes kept per date.
    #[arg(long)]
    top_i: Option<usize>,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        self.apply_data(&mut cfg.data);
        Ok(cfg)
    }

    fn has_data_flags(&self) -> bool {
        self.dataset.is_some()
            || self.options.is_some()
            || self.spot.is_some()
            || self.rates.is_some()
            || self.top_i.is_some()
    }

    fn apply_data(&self, d: &mut DataConfig) {
        if self.dataset.is_some() || self.options.is_some() || self.spot.is_some() || self.rates.is_some() {
            d.dataset = self.dataset.clone();
            d.options = self.options.clone();
            d.spot = self.spot.clone();
            d.rates = self.rates.clone();
        }
        if let Some(i) = self.top_i {
            d.top_i = i;
        }
    }

    /// Data overrides for a checkpoint-driven command.
    fn checkpoint_data(&self, ckpt: &Checkpoint) -> Option<DataConfig> {
        if self.config.is_some() || self.seed.is_some() {
            warn!("--config and --seed are ignored; the checkpoint carries its own configuration");
        }
        self.has_data_flags().then(|| {
            let mut d = ckpt.config.data.clone();
            self.apply_data(&mut d);
            d
        })
    }

    fn exec(&self) -> Result<Exec> {
        if self.jobs == 1 {
            return Ok(Exec::Sequential);
        }
        #[cfg(feature = "parallel")]
        if self.jobs > 1 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(self.jobs)
                .build_global()
                .map_err(|e| Error::Config(vec![format!("jobs: {e}")]))?;
        }
        #[cfg(not(feature = "parallel"))]
        if self.jobs > 1 {
            warn!("built without parallel support; --jobs is ignored");
        }
        Ok(Exec::Parallel)
    }
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    let value = match cli.command {
        Command::Simulate(c) => serde_json::to_value(pipeline::simulate(&c.run_config()?, &c.out_dir)?)?,
        Command::TrainOffline(c) => {
            let mut cfg = c.run_config()?;
            cfg.gem.exec = c.exec()?;
            let ckpt = pipeline::train_offline(&cfg, &c.out_dir)?;
            json!({ "checkpoint": c.out_dir.join(pipeline::CHECKPOINT_FILE), "data": ckpt.data_source, "report": ckpt.report })
        }
        Command::TrainOnline(c) => {
            let cfg = c.run_config()?;
            let ckpt = pipeline::train_online(&cfg, &c.out_dir)?;
            json!({ "checkpoint": c.out_dir.join(pipeline::CHECKPOINT_FILE), "data": ckpt.data_source, "report": ckpt.report })
        }
        Command::Forecast { common, checkpoint } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let data = common.checkpoint_data(&ckpt);
            let f = pipeline::forecast(&ckpt, data.as_ref(), &common.out_dir)?;
            json!({ "forecast": common.out_dir.join("forecast.csv"), "steps": f.len() })
        }
        Command::Evaluate {
            common,
            checkpoint: Some(path),
            ..
        } => {
            let ckpt = Checkpoint::load(&path)?;
            let data = common.checkpoint_data(&ckpt);
            let exec = common.exec()?;
            serde_json::to_value(pipeline::evaluate(&ckpt, data.as_ref(), &common.out_dir, exec)?)?
        }
        Command::Evaluate {
            common,
            checkpoint: None,
            seeds,
        } => {
            let mut cfg = common.run_config()?;
            let exec = common.exec()?;
            cfg.gem.exec = Exec::Sequential;
            let s = pipeline::evaluate_seeds(&cfg, seeds, &common.out_dir, exec)?;
            json!({ "horizons": s.horizons, "mean_errors": s.mean_errors, "mean_band_coverage": s.mean_band_coverage })
        }
    };
    Ok(value)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) => 2,
        Error::Numerical(_) | Error::NonFinite { .. } => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(v) => {
            // a closed stdout (e.g. piped into `head`) is not a failure
            let _ = writeln!(std::io::stdout(), "{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let doc = json!({ "error": e.kind(), "message": e.to_string(), "details": e.details() });
            eprintln!("{doc}");
            ExitCode::from(exit_code(&e))
        }
    }
}
