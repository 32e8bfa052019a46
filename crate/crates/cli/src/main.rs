use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use jepo_cli::commands::{self, EvalOptions};
use jepo_cli::config::{block_task, load_task, Generator, TaskBlock};
use jepo_cli::error::EXIT_OTHER;
use jepo_cli::{CliError, Overrides, RunConfig};
use jepo_core::trainer::{EvalSettings, EvalSplit};
use jepo_core::verify::Scope;

#[derive(Parser)]
#[command(name = "jepo", version, about = "Train and verify chain-of-thought policies on enumerable toy tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Reseeds the task generator, the initial policy and the trainer.
        #[arg(long, env = "JEPO_SEED")]
        seed: Option<u64>,
        /// Run directory.
        #[arg(long, env = "JEPO_RUN_DIR")]
        out: Option<PathBuf>,
        /// Leave wall-clock fields out of artifacts.
        #[arg(long)]
        reproducible: bool,
    },
    /// Score a checkpoint on a task split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Task document; alternatively the [task] block of --config.
        #[arg(long, conflicts_with = "config", required_unless_present = "config")]
        task: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, env = "JEPO_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        samples: usize,
        #[arg(long, default_value_t = 4)]
        proxy_n: usize,
        #[arg(long, default_value_t = 32)]
        proxy_trials: usize,
        /// Report path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the oracle invariant suite.
    Verify {
        #[arg(long, value_enum, default_value = "fast")]
        scope: ScopeArg,
        #[arg(long, env = "JEPO_SEED", default_value_t = 0)]
        seed: u64,
        /// Report path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Materialize a task document.
    MakeTask {
        /// Uses the [task] block of this config.
        #[arg(long, conflicts_with = "generator")]
        config: Option<PathBuf>,
        #[arg(long, value_enum, required_unless_present = "config")]
        generator: Option<GeneratorArg>,
        #[arg(long, default_value_t = 0.4)]
        unverifiable_fraction: f64,
        #[arg(long, env = "JEPO_SEED")]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ScopeArg {
    Fast,
    Full,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum GeneratorArg {
    Verifiable,
    SemiVerifiable,
    Unverifiable,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            reproducible,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            cfg.apply(&Overrides {
                seed,
                run_dir: out,
                reproducible,
            });
            let dir = cfg.output.run_dir.clone();
            let outcome = commands::train(&cfg, Some(&dir))?;
            let last = &outcome.summary.last;
            println!(
                "trained {} steps; train_reward {:.4} kl_to_ref {:.4} marginal_loglik {} proxy_nll {}; artifacts in {}",
                outcome.summary.steps,
                last.train_reward,
                last.kl_to_ref,
                last.marginal_loglik.map_or("n/a".into(), |v| format!("{v:.4}")),
                last.proxy_nll.map_or("n/a".into(), |v| format!("{v:.4}")),
                dir.display()
            );
        }
        Command::Eval {
            checkpoint,
            task,
            config,
            split,
            seed,
            samples,
            proxy_n,
            proxy_trials,
            out,
        } => {
            let task = match (task, config) {
                (Some(t), _) => load_task(&t)?,
                (None, Some(c)) => RunConfig::load(&c)?.build_task()?,
                (None, None) => unreachable!("clap requires --task or --config"),
            };
            let params = commands::load_checkpoint(&checkpoint)?;
            let opts = EvalOptions {
                split: match split {
                    SplitArg::Train => EvalSplit::Train,
                    SplitArg::Test => EvalSplit::Test,
                    SplitArg::All => EvalSplit::All,
                },
                seed,
                settings: EvalSettings {
                    samples,
                    proxy_n,
                    proxy_trials,
                    ..EvalSettings::default()
                },
            };
            opts.settings.validate().map_err(|e| CliError::Config(e.to_string()))?;
            let report = commands::evaluate(&params, &task, &opts)?;
            commands::emit_json(&report, out.as_deref())?;
        }
        Command::Verify { scope, seed, out } => {
            let scope = match scope {
                ScopeArg::Fast => Scope::Fast,
                ScopeArg::Full => Scope::Full,
            };
            let report = commands::verify_scope(scope, seed);
            for c in &report.checks {
                eprintln!("{:<8} {} ({:.2}s) {}", format!("{:?}", c.status).to_uppercase(), c.name, c.seconds, c.detail);
            }
            commands::emit_json(&report, out.as_deref())?;
            commands::ensure_passed(&report)?;
        }
        Command::MakeTask {
            config,
            generator,
            unverifiable_fraction,
            seed,
            out,
        } => {
            let task = match config {
                Some(c) => {
                    let mut cfg = RunConfig::load(&c)?;
                    cfg.apply(&Overrides {
                        seed,
                        ..Overrides::default()
                    });
                    cfg.build_task()?
                }
                None => {
                    let block = TaskBlock {
                        generator: generator.map(|g| match g {
                            GeneratorArg::Verifiable => Generator::Verifiable,
                            GeneratorArg::SemiVerifiable => Generator::SemiVerifiable,
                            GeneratorArg::Unverifiable => Generator::Unverifiable,
                        }),
                        seed: seed.unwrap_or(0),
                        unverifiable_fraction,
                        ..TaskBlock::default()
                    };
                    block_task(&block, std::path::Path::new("."))?
                }
            };
            jepo_cli::artifacts::write_atomic(&out, task.to_json()?.as_bytes())
                .with_context(|| format!("writing task to {}", out.display()))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<CliError>().map_or(EXIT_OTHER, CliError::exit_code);
            ExitCode::from(code)
        }
    }
}
