//! Experiment grids over pre-training size, the optional intermediate phase,
//! fine-tuning size and run index, with a resumable on-disk store and
//! table/figure emission.

pub mod cli;
pub mod grid;
pub mod plan;
pub mod plot;
pub mod report;
pub mod store;

pub use grid::{derive_seed, plan_cells, run_grid, CellPlan, GridOptions, GridSummary};
pub use plan::{CellKey, ExperimentPlan, Intermediate, PhaseOverride};
pub use plot::{emit_plot, Plot, PlotKind};
pub use report::{emit_table, Table, TableSelect};
pub use store::{RunRecord, Store};
