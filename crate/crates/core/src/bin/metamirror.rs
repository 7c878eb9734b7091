use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use metamirror::config::RunConfig;
use metamirror::harness::{self, HarnessError};

#[derive(Parser)]
#[command(name = "metamirror", about = "Meta-learning with learned mirror maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML run config; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Caps worker threads.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train and write a checkpoint plus the per-iteration loss CSV.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on meta-test tasks.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write convergence traces and solver timings for one or more checkpoints.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
    },
}

fn load(common: &Common) -> Result<RunConfig, HarnessError> {
    let mut cfg = RunConfig::load(common.config.as_deref(), std::env::vars())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(w) = common.workers {
        cfg.workers = Some(w);
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    if let Some(w) = cfg.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| HarnessError::Usage(format!("cannot size the worker pool: {e}")))?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Train { common } => {
            let cfg = load(&common)?;
            let out = harness::cmd_train(&cfg)?;
            println!("checkpoint {}", out.checkpoint.display());
            println!("loss trace {}", out.loss_csv.display());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load(&common)?;
            let out = harness::cmd_eval(&cfg, &checkpoint)?;
            println!("{}", harness::report_header(&harness::eval_inner(&cfg)?));
            println!("{}", harness::format_report(&out.report));
            if out.report.diverged > 0 {
                println!(
                    "{} of {} tasks diverged",
                    out.report.diverged, cfg.eval_tasks
                );
            }
            println!("written {}", out.csv.display());
        }
        Command::Diagnose { common, checkpoint } => {
            let cfg = load(&common)?;
            let out = harness::cmd_diagnose(&cfg, &checkpoint)?;
            println!("{}", harness::report_header(&harness::eval_inner(&cfg)?));
            for t in &out.traces {
                println!("{}: {}", t.label, harness::format_report(&t.report));
            }
            for t in &out.timing {
                println!(
                    "{}: {} {:e} s/step, gd {:e} s/step, ratio {:.3}",
                    t.label,
                    t.solver,
                    t.solver_seconds_per_step,
                    t.gd_seconds_per_step,
                    t.ratio()
                );
            }
            println!("written {}", out.timing_csv.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
