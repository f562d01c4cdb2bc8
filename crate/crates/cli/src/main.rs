//! `weft`: verification suite, training, evaluation and overhead benchmark.
//!
//! Exit codes: 0 success, 1 failed checks or runtime error, 2 configuration
//! or input error.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use weft_core::trainer::{LossArm, SchemeName};
use weft_core::verify::{Faults, Profile};

use config::{out_dir, RunConfig, RESOLVED_NAME};

/// Marks an error as a configuration or input problem (exit code 2).
#[derive(Debug)]
pub struct Usage(anyhow::Error);

impl Usage {
    pub fn wrap(e: anyhow::Error) -> anyhow::Error {
        anyhow::Error::new(Usage(e))
    }
}

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser)]
#[command(name = "weft", version, about = "Entropy-weighted fine-tuning lab for masked diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory (overrides WEFT_OUT_DIR).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long)]
    seed: Option<u64>,
    /// Task: modadd, sudoku4 or countdown.
    #[arg(long)]
    task: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Fast,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    BetaSign,
}

#[derive(Subcommand)]
enum Command {
    /// Run the property suite and write a JSON report.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        profile: Option<ProfileArg>,
        /// Deliberately break one check.
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Train one arm; writes metrics, timings, checkpoint and resolved config.
    Train {
        /// Config file (same as --config).
        config_path: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
        /// sft, weft, sw or dream.
        #[arg(long)]
        loss: Option<String>,
        /// sqrt_entropy, raw_entropy, nll or uniform.
        #[arg(long)]
        scheme: Option<String>,
        /// Cap on optimizer steps (0 = epochs decide).
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Decode an evaluation set with a checkpoint and report exact-match accuracy.
    Eval {
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gen_length: Option<usize>,
        #[arg(long)]
        block_length: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        /// Number of evaluation instances.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Time SFT and WeFT steps on identical data.
    Bench {
        config_path: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<u64>,
        /// sqrt_entropy, raw_entropy or nll for the WeFT arm.
        #[arg(long)]
        scheme: Option<String>,
    },
}

fn load(common: &Common, positional: Option<&PathBuf>) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_file(positional.or(common.config.as_ref()).map(|p| p.as_path()))?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(t) = &common.task {
        cfg.task.name = t.clone();
    }
    Ok(cfg)
}

fn finish(cfg: &RunConfig, common: &Common, command: &str) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = out_dir(common.out.as_deref(), command)?;
    cfg.write_resolved(&dir)?;
    Ok(dir)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Verify { common, profile, inject_fault } => {
            let (cfg, dir) = (|| {
                let mut cfg = load(&common, None)?;
                if let Some(p) = profile {
                    cfg.verify.profile = match p {
                        ProfileArg::Fast => Profile::Fast,
                        ProfileArg::Full => Profile::Full,
                    };
                }
                let dir = finish(&cfg, &common, "verify")?;
                Ok((cfg, dir))
            })()
            .map_err(Usage::wrap)?;
            let faults = Faults { flip_beta_sign: matches!(inject_fault, Some(FaultArg::BetaSign)) };
            let ok = commands::verify(&cfg, faults, &dir)?;
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Train { config_path, common, loss, scheme, steps, epochs } => {
            let (cfg, dir) = (|| {
                let mut cfg = load(&common, config_path.as_ref())?;
                if let Some(l) = loss {
                    cfg.train.loss = LossArm::parse(&l)?;
                }
                if let Some(s) = scheme {
                    cfg.train.scheme = SchemeName::parse(&s)?;
                }
                if let Some(n) = steps {
                    cfg.train.max_steps = n;
                }
                if let Some(e) = epochs {
                    cfg.train.epochs = e;
                }
                let dir = finish(&cfg, &common, "train")?;
                Ok((cfg, dir))
            })()
            .map_err(Usage::wrap)?;
            commands::train(&cfg, &dir)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { checkpoint, common, gen_length, block_length, steps, samples } => {
            let (cfg, dir) = (|| {
                // a training run leaves its resolved config beside the checkpoint
                let sibling = checkpoint.parent().map(|d| d.join(RESOLVED_NAME)).filter(|p| p.is_file());
                let mut cfg = load(&common, if common.config.is_none() { sibling.as_ref() } else { None })?;
                cfg.decode.gen_length = gen_length.or(cfg.decode.gen_length);
                cfg.decode.block_length = block_length.or(cfg.decode.block_length);
                cfg.decode.n_steps = steps.or(cfg.decode.n_steps);
                if let Some(n) = samples {
                    cfg.task.eval_size = n;
                }
                cfg.decode.resolve(&cfg.task.spec()?, cfg.train.seed)?;
                let dir = finish(&cfg, &common, "eval")?;
                Ok((cfg, dir))
            })()
            .map_err(Usage::wrap)?;
            commands::eval(&cfg, &checkpoint, &dir)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench { config_path, common, steps, scheme } => {
            let (cfg, dir) = (|| {
                let mut cfg = load(&common, config_path.as_ref())?;
                if let Some(n) = steps {
                    cfg.bench.steps = n;
                }
                if let Some(s) = scheme {
                    cfg.train.scheme = SchemeName::parse(&s)?;
                }
                let dir = finish(&cfg, &common, "bench")?;
                Ok((cfg, dir))
            })()
            .map_err(Usage::wrap)?;
            let report = commands::bench(&cfg, &dir)?;
            Ok(if report.forward_ratio_exact { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Usage>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
