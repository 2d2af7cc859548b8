//! Command-line driver: build the world, train policies, evaluate, and play.
//!
//! Every command reads a [`config::RunConfig`] and writes under its `out_dir`:
//!
//! ```text
//! build/   manifest.json corpus.jsonl heldout.jsonl bank.json oracle_{trueA,depA,indA}.json
//! train/   il.json  {wiring}/T{h}.json  metrics/il.jsonl  metrics/rl_{wiring}_T{h}.jsonl
//! eval/    grid.jsonl table.txt transcripts.jsonl
//! play/    session.json
//! ```

use std::fmt;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub mod artifacts;
pub mod config;
pub mod pipeline;
pub mod play;

use config::RunConfig;

/// A problem with the command line or the configuration (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// 2 for usage and configuration errors, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 2;
        }
        if let Some(questioner::Error::Config(_)) = cause.downcast_ref::<questioner::Error>() {
            return 2;
        }
    }
    1
}

/// Seed for a named stage, derived from the master seed.
pub fn stage_seed(master: u64, label: &str) -> u64 {
    // FNV-1a over the label keeps the tag stable across builds
    let tag = label
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    questioner::rng::derive(master, &[tag])
}

#[derive(Debug, Parser)]
#[command(name = "questioner", version, about = "Goal-oriented questioning agents")]
pub struct Cli {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override the output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the scene corpora, sample the question bank and fit the oracles.
    Build {
        #[arg(long)]
        force: bool,
    },
    /// Imitation then progressive policy-gradient training.
    Train {
        /// Comma-separated stages: il, rl, rlN, rlN-M. Default: all.
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<String>>,
        /// Retrain stages whose checkpoints already exist.
        #[arg(long)]
        force: bool,
    },
    /// Accuracy grid over horizons, questioners and oracle wirings.
    Eval {
        /// Replay and verify a transcript file instead of evaluating.
        #[arg(long, value_name = "PATH")]
        check_transcripts: Option<PathBuf>,
    },
    /// Play against a questioner, answering its questions yourself.
    Play {
        /// Read answers from a file instead of the terminal.
        #[arg(long, value_name = "PATH")]
        answers_file: Option<PathBuf>,
    },
    /// Recount pairwise agreement and informative counts of the built bank.
    AuditBank,
    /// Print the effective configuration.
    ShowConfig,
}

pub fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    if let Some(f) = &cfg.play.scene_file {
        if !f.exists() {
            return Err(usage(format!("scene file {} does not exist", f.display())));
        }
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Build { force } => {
            let report = pipeline::build(&cfg, force)?;
            println!("{report}");
        }
        Command::Train { stages, force } => {
            let stages = pipeline::StageSet::parse(stages.as_deref(), &cfg)?;
            pipeline::train(&cfg, &stages, force)?;
        }
        Command::Eval { check_transcripts } => match check_transcripts {
            Some(path) => {
                let n = pipeline::check_transcripts(&cfg, &path)?;
                println!("{n} transcript(s) verified");
            }
            None => {
                let grid = pipeline::eval(&cfg)?;
                print!("{}", pipeline::render_table(&grid));
            }
        },
        Command::Play { answers_file } => {
            play::run(&cfg, answers_file.as_deref())?;
        }
        Command::AuditBank => {
            let audit = pipeline::audit(&cfg)?;
            println!(
                "pairs {} max agreement {:.4} min informative {}",
                audit.pairs_checked, audit.max_agreement, audit.min_informative
            );
            if !audit.passed() {
                anyhow::bail!(
                    "bank audit failed: {} agreement and {} count violations",
                    audit.agreement_violations.len(),
                    audit.count_violations.len()
                );
            }
            println!("audit passed");
        }
        Command::ShowConfig => print!("{}", cfg.to_toml()?),
    }
    Ok(())
}
