//! Command-line front end for the forecasting pipeline.
//!
//! Every flag can also be set through a `HIERCAST_`-prefixed environment
//! variable. Exit codes: 0 ok, 2 configuration error, 3 data / missing
//! stage input, 4 inference failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hiercast::config::PipelineConfig;
use hiercast::error::Result;
use hiercast::hier::Backend;
use hiercast::pipeline::{
    cmd_bin, cmd_eval, cmd_fit, cmd_generate, cmd_infer, cmd_pipeline, resolve_out_dir,
};

#[derive(Parser)]
#[command(
    name = "hiercast",
    version,
    about = "Hierarchical demand forecasting over point-of-sale streams"
)]
struct Cli {
    /// JSON configuration file; missing fields take their defaults.
    #[arg(long, global = true, env = "HIERCAST_CONFIG", value_name = "FILE")]
    config: Option<PathBuf>,

    /// Master seed, overriding the configured one.
    #[arg(long, global = true, env = "HIERCAST_SEED")]
    seed: Option<u64>,

    /// Artifact directory (default: ./out).
    #[arg(long, global = true, env = "HIERCAST_OUT", value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy, Default)]
struct SamplerArgs {
    /// Posterior sampler backend.
    #[arg(long, env = "HIERCAST_BACKEND", value_enum)]
    backend: Option<Backend>,

    /// Number of chains (minimum 2).
    #[arg(long, env = "HIERCAST_CHAINS")]
    chains: Option<usize>,

    /// Iterations per chain, warmup included.
    #[arg(long, env = "HIERCAST_ITERS")]
    iters: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic transaction stream.
    Generate,
    /// Parse transactions and bin them into fixed-width intervals.
    Bin,
    /// Fit the per-location-day log-quadratic curves.
    Fit,
    /// Sample the hierarchical posterior for each coefficient class.
    Infer(SamplerArgs),
    /// Score the fitted models on the hold-out half.
    Eval,
    /// Run every stage in order.
    Pipeline(SamplerArgs),
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                hiercast::Error::Config(format!("cannot read {}: {e}", path.display()))
            })?;
            PipelineConfig::from_json(&text)?
        }
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Command::Infer(s) | Command::Pipeline(s) = &cli.command {
        if let Some(b) = s.backend {
            cfg.backend = b;
        }
        if let Some(c) = s.chains {
            cfg.chains = c;
        }
        if let Some(i) = s.iters {
            cfg.iterations = i;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out_dir = resolve_out_dir(cli.out.clone());
    match &cli.command {
        Command::Generate => cmd_generate(&cfg, &out_dir),
        Command::Bin => cmd_bin(&cfg, &out_dir),
        Command::Fit => cmd_fit(&cfg, &out_dir),
        Command::Infer(_) => cmd_infer(&cfg, &out_dir),
        Command::Eval => cmd_eval(&cfg, &out_dir),
        Command::Pipeline(_) => cmd_pipeline(&cfg, &out_dir),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
