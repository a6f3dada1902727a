use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use audio_jepa::commands::{self, ConfigArgs, PretrainArgs, ProbeArgs, ProbeInput, ProbeMode, SynthArgs};
use audio_jepa::write_atomic;
use clap::{Args, Parser, Subcommand};

/// Self-supervised joint-embedding predictive pretraining for audio.
#[derive(Parser)]
#[command(name = "audio-jepa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigFlags {
    /// TOML config file with flat dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set train.total_steps=100`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

impl From<ConfigFlags> for ConfigArgs {
    fn from(f: ConfigFlags) -> Self {
        ConfigArgs {
            config: f.config,
            sets: f.sets,
            seed: f.seed,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the context encoder and predictor; writes checkpoints and a metrics log.
    Pretrain {
        #[command(flatten)]
        config: ConfigFlags,
        /// Clip manifest (defaults to `paths.manifest`).
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Run directory holding `checkpoints/` and `logs/`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this checkpoint; its stored config is used.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Progress line interval in steps (0 = silent).
        #[arg(long, default_value_t = 10)]
        progress_every: u64,
    },
    /// Write frozen target-encoder embeddings for every clip in a manifest.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate embeddings with a kNN or linear probe; writes a JSON report.
    Probe {
        #[command(flatten)]
        config: ConfigFlags,
        /// Embedding file from `embed`.
        #[arg(long, conflicts_with_all = ["checkpoint", "manifest"])]
        embeddings: Option<PathBuf>,
        /// Embed on the fly from this checkpoint (needs --manifest).
        #[arg(long, requires = "manifest")]
        checkpoint: Option<PathBuf>,
        #[arg(long, requires = "checkpoint")]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "knn")]
        mode: ProbeMode,
        /// Report path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the labeled synthetic corpus and its manifest.
    SynthData {
        #[command(flatten)]
        config: ConfigFlags,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        train_per_class: usize,
        #[arg(long, default_value_t = 20)]
        test_per_class: usize,
    },
    /// Print configuration and parameter counts of a checkpoint or config.
    Inspect {
        #[command(flatten)]
        config: ConfigFlags,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Pretrain {
            config,
            manifest,
            out,
            resume,
            progress_every,
        } => {
            let outcome = commands::pretrain(&PretrainArgs {
                config: config.into(),
                manifest,
                out,
                resume,
                progress_every,
            })?;
            println!(
                "ran {} steps; final checkpoint {}; log {}",
                outcome.steps_run,
                outcome.final_checkpoint.display(),
                outcome.log.display()
            );
        }
        Command::Embed {
            checkpoint,
            manifest,
            out,
        } => {
            let outcome = commands::embed(&checkpoint, &manifest, &out)?;
            println!("wrote {} embeddings to {}", outcome.file.records.len(), out.display());
            if !outcome.failures.is_empty() {
                for (id, why) in &outcome.failures {
                    eprintln!("skipped {id}: {why}");
                }
                bail!("{} of {} clips could not be embedded", outcome.failures.len(), outcome.failures.len() + outcome.file.records.len());
            }
        }
        Command::Probe {
            config,
            embeddings,
            checkpoint,
            manifest,
            mode,
            out,
        } => {
            let input = match (embeddings, checkpoint, manifest) {
                (Some(e), _, _) => ProbeInput::Embeddings(e),
                (None, Some(checkpoint), Some(manifest)) => ProbeInput::Checkpoint { checkpoint, manifest },
                _ => bail!("give --embeddings, or --checkpoint with --manifest"),
            };
            let results = commands::probe(&ProbeArgs {
                input,
                mode,
                config: config.into(),
            })?;
            let json = results.to_json();
            match out {
                Some(p) => {
                    write_atomic(&p, json.as_bytes())?;
                    println!("accuracy {:.4}; report {}", results.accuracy, p.display());
                }
                None => print!("{json}"),
            }
        }
        Command::SynthData {
            config,
            out,
            train_per_class,
            test_per_class,
        } => {
            let manifest = commands::synth_data(&SynthArgs {
                config: config.into(),
                out: out.clone(),
                train_per_class,
                test_per_class,
            })
            .with_context(|| format!("writing corpus to {}", out.display()))?;
            println!("wrote {} clips and {}", manifest.rows.len(), out.join("manifest.csv").display());
        }
        Command::Inspect { config, checkpoint } => {
            print!("{}", commands::inspect(checkpoint.as_deref(), &config.into())?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
