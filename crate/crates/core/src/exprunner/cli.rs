//! Command-line surface of the runner.
//!
//! Exit codes:
//!
//! | code | category |
//! |------|----------|
//! | 0 | success |
//! | 2 | usage (bad flag or argument) |
//! | 3 | empty (no records, or a plot with no series) |
//! | 4 | plan or config |
//! | 5 | data or label |
//! | 6 | training (shape, mask, non-finite) |
//! | 7 | checkpoint or integrity |
//! | 8 | store, metrics or I/O |
//! | 9 | at least one grid cell failed |

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use super::plot::PlotKind;
use super::report::TableSelect;
use crate::error::Error;

#[derive(Debug, Parser)]
#[command(
    name = "viny",
    version,
    about = "Train and evaluate tiny vision transformer experiment grids"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run (or resume) every cell of a plan.
    Run {
        plan: PathBuf,
        /// Skip cells whose record is already complete.
        #[arg(long)]
        resume: bool,
        /// Prefix for relative dataset folders; defaults to $DATA_ROOT.
        #[arg(long)]
        data_root: Option<PathBuf>,
        /// Run store directory; defaults to `runs/<plan name>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replaces the plan's base seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Print the resolved cells and exit without training.
        #[arg(long)]
        dry_run: bool,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Aggregate stored records into a markdown and CSV table.
    Table {
        store: PathBuf,
        /// baseline, pretrained, intermediate or all.
        #[arg(long, default_value = "all", value_parser = parse_select)]
        select: TableSelect,
        /// Directory for `table-<select>.md` and `.csv`; defaults to `<store>/reports`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw a figure (SVG plus its data as CSV).
    Plot {
        store: PathBuf,
        #[arg(long, value_parser = parse_kind)]
        kind: PlotKind,
        /// Output directory; defaults to `<store>/reports`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Show one record; the cell is `pretrain/on|off/finetune/run` or a hash prefix.
    Inspect { store: PathBuf, cell: String },
}

fn parse_select(s: &str) -> Result<TableSelect, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_kind(s: &str) -> Result<PlotKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

pub const EXIT_EMPTY: u8 = 3;
pub const EXIT_CELLS_FAILED: u8 = 9;

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Empty(_) => EXIT_EMPTY,
        Error::Plan(_) | Error::Config(_) => 4,
        Error::Data(_) | Error::Label(_) => 5,
        Error::Shape(_) | Error::Mask(_) | Error::NonFinite(_) => 6,
        Error::Checkpoint(_) | Error::Integrity(_) => 7,
        Error::Store(_) | Error::Metrics(_) | Error::Io { .. } => 8,
    }
}
