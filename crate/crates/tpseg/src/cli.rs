//! Argument parsing and dispatch for the `tpseg` binary.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use tpseg_core::gradcheck::Primitive;
use tpseg_core::{Axis, FusionKind, FusionPolicy};

use crate::commands;
use crate::config::RunConfig;
use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "tpseg",
    version,
    about = "Tri-planar 2.5D segmentation of CT volumes"
)]
pub struct Cli {
    /// JSON run configuration; only the fields it sets override the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for phantom generation, initialization and sample order.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (the dataset directory for phantom-gen).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// CPU-sized preset: 64x64/3, 48x48/5, 48x48/5 planes, depth 2, base 8, lr 1e-3.
    #[arg(long, global = true)]
    pub desk_scale: bool,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset with an 8:2:1 split.
    PhantomGen {
        /// Number of cases.
        #[arg(long, default_value_t = 11)]
        cases: usize,
    },
    /// Train the model of one plane on the training split.
    Train {
        #[arg(long, value_parser = parse_axis)]
        plane: Axis,
    },
    /// Write per-plane probability volumes.
    Predict {
        #[command(flatten)]
        select: CaseSelection,
        /// A plane name or `all`.
        #[arg(long, default_value = "all")]
        plane: String,
    },
    /// Fuse the three plane predictions and evaluate against the labels.
    ///
    /// How the three 2D segmentations are combined into one volume is not
    /// fixed by the method description; majority vote is the default and the
    /// other policies are provided so each can be reported.
    FuseEval {
        #[command(flatten)]
        select: CaseSelection,
        /// majority, mean_threshold, union, intersection or single_plane:<axis>.
        #[arg(long)]
        policy: Option<String>,
        /// Probability threshold in (0, 1).
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Check every differentiable primitive against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// Corrupt the backward pass of one primitive (test fixture).
        #[arg(long, hide = true, value_parser = parse_primitive)]
        inject_fault: Option<Primitive>,
    },
}

#[derive(Debug, Args)]
pub struct CaseSelection {
    /// A single case name.
    #[arg(long, conflicts_with = "split")]
    pub case: Option<String>,
    /// train, val, test or all.
    #[arg(long, default_value = "test")]
    pub split: String,
}

fn parse_axis(s: &str) -> std::result::Result<Axis, String> {
    Axis::parse(s)
        .ok_or_else(|| format!("unknown plane {s:?}; expected axial, sagittal or coronal"))
}

fn parse_primitive(s: &str) -> std::result::Result<Primitive, String> {
    Primitive::parse(s).ok_or_else(|| format!("unknown primitive {s:?}"))
}

impl Cli {
    /// Preset, config file and flag overrides, in that order.
    pub fn resolve_config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::resolve(self.desk_scale, self.config.as_deref())?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(data) = &self.data {
            cfg.data_dir = data.clone();
        }
        if let Some(out) = &self.out {
            if matches!(self.command, Command::PhantomGen { .. }) {
                cfg.data_dir = out.clone();
            } else {
                cfg.out_dir = out.clone();
            }
        }
        Ok(cfg)
    }
}

fn cases(cfg: &RunConfig, select: &CaseSelection) -> Result<Vec<String>> {
    match &select.case {
        Some(name) => Ok(vec![name.clone()]),
        None => commands::split_cases(cfg, &select.split),
    }
}

/// Runs the parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = cli.resolve_config()?;
    if let Command::FuseEval {
        policy, threshold, ..
    } = &cli.command
    {
        if let Some(p) = policy {
            let kind = FusionKind::parse(p)
                .ok_or_else(|| Error::Usage(format!("unknown fusion policy {p:?}")))?;
            cfg.fusion = FusionPolicy { kind, ..cfg.fusion };
        }
        if let Some(t) = threshold {
            cfg.fusion.threshold = *t;
        }
    }
    if cli.print_config {
        print!("{}", cfg.to_json());
        return Ok(());
    }
    match &cli.command {
        Command::PhantomGen { cases } => {
            cfg.validate()?;
            commands::phantom_gen(*cases, cfg.seed, &cfg.data_dir, cli.force).map(|_| ())
        }
        Command::Train { plane } => commands::train(&cfg, *plane, cli.force).map(|_| ()),
        Command::Predict { select, plane } => {
            let axes = if plane == "all" {
                Axis::ALL.to_vec()
            } else {
                vec![parse_axis(plane).map_err(Error::Usage)?]
            };
            commands::predict(&cfg, &cases(&cfg, select)?, &axes)
        }
        Command::FuseEval { select, .. } => {
            commands::fuse_eval(&cfg, &cases(&cfg, select)?, &cfg.fusion).map(|_| ())
        }
        Command::Gradcheck {
            trials,
            inject_fault,
        } => commands::gradcheck(*trials, cfg.seed, *inject_fault).map(|_| ()),
    }
}
