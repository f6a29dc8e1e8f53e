use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flowmatch_cli::commands::{self, Overrides, Sweep};
use flowmatch_cli::config::SampleFormat;
use flowmatch_cli::{oracle, Checkpoint, CliError, CliResult, RunConfig};

#[derive(Parser)]
#[command(name = "flowmatch", version, about = "Conditional flow matching with classifier-free guidance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a velocity network; writes loss.csv and checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (default: output_dir from the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, hide = true)]
        inject_nan_at: Option<u64>,
    },
    /// Draw samples of one class from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Guidance scale (default 3).
        #[arg(long)]
        w: Option<f64>,
        /// Euler steps (default 200).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        cond: Option<usize>,
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
        /// Also write every chain's latent trajectory.
        #[arg(long)]
        trajectories: bool,
    },
    /// Evaluate a checkpoint, optionally sweeping guidance scale or steps.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "none")]
        sweep: Sweep,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        w: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Run the oracle, Euler-order and gradient self-checks.
    OracleCheck {
        #[arg(long, default_value = "runs/oracle-check")]
        out: PathBuf,
        #[arg(long, hide = true)]
        inject_grad_fault: bool,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum FormatArg {
    Csv,
    Jsonl,
}

fn load_optional(path: Option<&Path>) -> CliResult<Option<RunConfig>> {
    path.map(|p| RunConfig::load(Some(p))).transpose()
}

fn run(cli: Cli) -> CliResult<()> {
    flowmatch_cli::init_threads()?;
    match cli.command {
        Command::Train {
            config,
            out,
            seed,
            inject_nan_at,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let out = out.unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
            let summary = commands::train(&cfg, &out, inject_nan_at)?;
            println!(
                "trained {} steps; final loss {}; null fraction {:.4}; output in {}",
                summary.steps,
                summary.final_loss.map_or("n/a".into(), |l| format!("{l:.6}")),
                summary.null_fraction,
                out.display()
            );
        }
        Command::Sample {
            checkpoint,
            config,
            out,
            seed,
            w,
            steps,
            n,
            cond,
            format,
            trajectories,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let mut cfg = commands::resolve_for_checkpoint(&ck, load_optional(config.as_deref())?);
            commands::apply_sample_overrides(
                &mut cfg,
                &Overrides {
                    seed,
                    w,
                    steps,
                    n,
                    cond,
                },
            );
            if let Some(f) = format {
                cfg.sample.format = match f {
                    FormatArg::Csv => SampleFormat::Csv,
                    FormatArg::Jsonl => SampleFormat::Jsonl,
                };
            }
            cfg.sample.trajectories |= trajectories;
            let out = out.unwrap_or_else(|| Path::new(&cfg.output_dir).join("samples"));
            let path = commands::sample(&ck, &cfg, &out)?;
            println!("wrote {} samples to {}", cfg.sample.n, path.display());
        }
        Command::Eval {
            checkpoint,
            config,
            out,
            sweep,
            seed,
            w,
            steps,
            n,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let mut cfg = commands::resolve_for_checkpoint(&ck, load_optional(config.as_deref())?);
            commands::apply_eval_overrides(
                &mut cfg,
                sweep,
                &Overrides {
                    seed,
                    w,
                    steps,
                    n,
                    cond: None,
                },
            );
            let out = out.unwrap_or_else(|| Path::new(&cfg.output_dir).join("eval"));
            let reports = commands::eval(&ck, &cfg, sweep, &out)?;
            println!("{}", flowmatch::MetricReport::CSV_HEADER);
            for r in &reports {
                println!("{}", r.csv_row());
            }
        }
        Command::OracleCheck { out, inject_grad_fault } => {
            std::fs::create_dir_all(&out)?;
            RunConfig::default().echo(&out)?;
            let outcomes = oracle::run_all(inject_grad_fault)?;
            let mut report = String::new();
            for o in &outcomes {
                report.push_str(&o.line());
                report.push('\n');
            }
            std::fs::write(out.join("report.txt"), &report)?;
            print!("{report}");
            let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
            if !failed.is_empty() {
                return Err(CliError::CheckFailed(failed.join(", ")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
