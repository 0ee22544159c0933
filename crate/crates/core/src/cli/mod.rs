//! Command implementations behind the `vdistill` binary.
//!
//! Every command works inside a run directory:
//!
//! ```text
//! run/
//!   config.toml            resolved settings of the last command
//!   data/{train,dev,test}.jsonl
//!   teacher.ckpt  teacher.verb.ckpt
//!   student.ckpt  student.verb.ckpt
//!   log.jsonl              one record per optimizer step, all stages
//!   trace.jsonl            matching trace of the last interaction stage
//!   reports/               eval JSON, match statistics, ablation CSV
//! ```

mod ablate;
mod report;
mod rundir;

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::train::{Stage, StudentRoute};

pub use ablate::{cmd_ablate, load_ablation_csv, AblationGrid, AblationRow, Cell, Suite};
pub use report::{load_match_stats_csv, match_stats_csv, match_stats_svg};
pub use rundir::{
    cmd_eval, cmd_generate_data, cmd_match_stats, cmd_trace_verbalize, cmd_train, resolve_config, RunDir,
};

#[derive(Parser, Debug)]
#[command(name = "vdistill", version, about = "Layer-wise distillation through verbalized layers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// How a command assembles its configuration: preset, then the run
/// directory's `config.toml`, then `--config`, then each `--set`.
#[derive(Args, Clone, Debug)]
pub struct ConfigArgs {
    /// Directory holding inputs and outputs of the run.
    #[arg(long, default_value = "run")]
    pub run_dir: PathBuf,
    /// Flat TOML file of settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base preset (default, toy).
    #[arg(long, default_value = "default")]
    pub preset: String,
    /// Override one setting, e.g. `--set il_op=ce`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Role {
    Teacher,
    Student,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the train/dev/test splits into the run directory.
    GenerateData(ConfigArgs),
    /// Run one training stage, or every stage in order.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "all")]
        stage: Stage,
        /// Student route used by `--stage all`.
        #[arg(long, default_value = "full")]
        route: StudentRoute,
    },
    /// Greedy exact-match of a checkpoint (and of its verbalizers).
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "student")]
        model: Role,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Decode one example through every verbalized layer.
    TraceVerbalize {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "teacher")]
        model: Role,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// First/last-decile histograms of matched teacher taps.
    MatchStats {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Trace log to read (defaults to the run directory's trace.jsonl).
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Also write an SVG bar chart.
        #[arg(long)]
        svg: bool,
    },
    /// Run an ablation grid and append one CSV row per cell and seed.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// TOML grid description.
        #[arg(long)]
        grid: PathBuf,
        /// Output CSV (defaults to reports/ablate.csv in the run directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Executes a parsed command line, writing human-readable output to stdout.
pub fn run(cli: Cli) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::GenerateData(cfg) => cmd_generate_data(&cfg, &mut out),
        Command::Train { cfg, stage, route } => cmd_train(&cfg, stage, route, &mut out),
        Command::Eval { cfg, model, split } => cmd_eval(&cfg, model, split, &mut out),
        Command::TraceVerbalize { cfg, model, split, index } => cmd_trace_verbalize(&cfg, model, split, index, &mut out),
        Command::MatchStats { cfg, trace, svg } => cmd_match_stats(&cfg, trace.as_deref(), svg, &mut out),
        Command::Ablate { cfg, grid, out: csv } => {
            let resolved = resolve_config(&cfg)?;
            let run = RunDir::new(&cfg.run_dir);
            run.write_config(&resolved)?;
            let grid = AblationGrid::load(&grid)?;
            let csv = csv.unwrap_or_else(|| run.reports().join("ablate.csv"));
            let rows = cmd_ablate(&resolved, &grid, &csv, &mut out)?;
            writeln!(out, "{} rows in {}", rows.len(), csv.display()).map_err(Error::Io)
        }
    }
}

/// Splits `KEY=VALUE`.
pub fn parse_override(raw: &str) -> Result<(&str, &str)> {
    raw.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| Error::Config(format!("override {raw:?} is not KEY=VALUE")))
}
