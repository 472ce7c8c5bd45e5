//! Command-line front end: cache planning, training, generation, evaluation and self-checks.
//!
//! Exit codes are 0 on success, 1 when a check or validation fails, 2 on any
//! other error.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod plan;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

/// A failed validation or check, as opposed to a runtime fault.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

pub const EXIT_OK: u8 = 0;
pub const EXIT_INVALID: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;

pub fn exit_code(err: &anyhow::Error) -> u8 {
    let config_error = matches!(
        err.downcast_ref::<cla_core::Error>(),
        Some(cla_core::Error::Config(_))
    );
    if err.downcast_ref::<Invalid>().is_some() || config_error {
        EXIT_INVALID
    } else {
        EXIT_RUNTIME
    }
}

#[derive(Debug, Parser)]
#[command(name = "cla", version, about = "Cross-layer KV sharing for small decoder-only transformers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Greedy,
    Temperature,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    All,
    Train,
    Val,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Report KV-cache size, parameters and FLOPs for a config.
    Plan {
        /// Run config file.
        #[arg(required_unless_present = "table1")]
        config: Option<PathBuf>,
        /// Check every built-in 1B-scale attention config against its recorded cache size.
        #[arg(long, conflicts_with = "config")]
        table1: bool,
    },
    /// Train a model and write a checkpoint plus a loss curve.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Training text; overrides `data.path`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Peak learning rate; repeat for a sweep with one run per value.
        #[arg(long = "peak-lr", num_args = 1..)]
        peak_lr: Vec<f64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Output directory.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Print the loss every this many steps (0 = never).
        #[arg(long, default_value_t = 50)]
        log_every: usize,
    },
    /// Continue a prompt from a checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "")]
        prompt: String,
        /// Tokens to generate.
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, value_enum, default_value_t = Mode::Greedy)]
        mode: Mode,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also print the KV-cache bytes held at the end of generation.
        #[arg(long)]
        report_memory: bool,
    },
    /// Perplexity of a checkpoint on a text file.
    EvalPpl {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Which part of the file to score, using the checkpoint's validation fraction.
        #[arg(long, value_enum, default_value_t = Split::All)]
        split: Split,
    },
    /// Run the numerical self-checks (all of them when no flag is given).
    Check {
        /// Backpropagation against central finite differences.
        #[arg(long)]
        grads: bool,
        /// Cached incremental decoding against full-context forward passes.
        #[arg(long)]
        equivalence: bool,
        /// Layers of a group read bit-identical keys and values.
        #[arg(long)]
        cache: bool,
        /// Verify a checkpoint file's CRC and contents.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write a freshly initialised checkpoint.
    Init {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a deterministic English-like byte corpus.
    Corpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1 << 20)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Executes one command, writing its report to `out`.
pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> anyhow::Result<()> {
    match cli.command {
        Command::Plan { config, table1 } => {
            if table1 {
                plan::table1(out)
            } else {
                plan::plan_file(config.as_deref().expect("clap requires a config"), out)
            }
        }
        Command::Train {
            config,
            data,
            seed,
            peak_lr,
            steps,
            out: dir,
            log_every,
        } => commands::train(
            &commands::TrainArgs {
                config,
                data,
                seed,
                peak_lr,
                steps,
                out: dir,
                log_every,
            },
            out,
        ),
        Command::Generate {
            checkpoint,
            prompt,
            n,
            mode,
            temperature,
            seed,
            report_memory,
        } => {
            let mode = match mode {
                Mode::Greedy => cla_core::SamplingMode::Greedy,
                Mode::Temperature => cla_core::SamplingMode::Temperature {
                    tau: temperature,
                    seed,
                },
            };
            commands::generate(&checkpoint, &prompt, n, mode, report_memory, out)
        }
        Command::EvalPpl {
            checkpoint,
            data,
            split,
        } => commands::eval_ppl(&checkpoint, &data, split, out),
        Command::Check {
            grads,
            equivalence,
            cache,
            checkpoint,
        } => {
            let none = !(grads || equivalence || cache || checkpoint.is_some());
            commands::check(
                commands::Checks {
                    grads: grads || none,
                    equivalence: equivalence || none,
                    cache: cache || none,
                    checkpoint,
                },
                out,
            )
        }
        Command::Init { config, seed, out: path } => commands::init(&config, seed, &path, out),
        Command::Corpus { out: path, bytes, seed } => commands::corpus(&path, bytes, seed, out),
    }
}
