//! Command-line front end for `centroid-recal`: dataset generation,
//! training, evaluation, centroid dumps and ablation sweeps.
//!
//! Every command is deterministic given its arguments. Output documents
//! are pretty-printed JSON; wall-clock timings are kept out of them.

pub mod commands;
pub mod config;
pub mod report;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use centroid_recal::Merge;

#[derive(Debug, Parser)]
#[command(
    name = "recal",
    version,
    about = "Centroid-aware recalibration: data, training, evaluation, ablation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/val/test_i/test_ii CSVs and a manifest from a dataset spec.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write checkpoints and report.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a CSV with a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train each variant on several seeds and write one summary table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated subset of concat, add, recal_only, backbone_only.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "concat,add,recal_only,backbone_only"
        )]
        variants: Vec<Merge>,
        /// Seeds per variant, counting up from the config's seed.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a checkpoint's centroid table as text.
    Centroids {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out } => commands::gen_data(&spec, &out),
        Command::Train { config, out, seed } => {
            commands::train(&config, out.as_deref(), seed).map(|_| ())
        }
        Command::Eval {
            checkpoint,
            data,
            report,
        } => commands::eval(&checkpoint, &data, &report),
        Command::Ablate {
            config,
            variants,
            seeds,
            out,
        } => {
            let table = commands::ablate(&config, &variants, seeds, out.as_deref())?;
            print!("{}", table.to_markdown());
            Ok(())
        }
        Command::Centroids { checkpoint, out } => {
            let text = commands::centroids(&checkpoint)?;
            match out {
                Some(p) => std::fs::write(&p, text)
                    .map_err(|e| anyhow::anyhow!("writing {}: {e}", p.display())),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
    }
}
