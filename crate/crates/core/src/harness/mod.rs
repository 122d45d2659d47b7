//! Experiment configuration, sweeps and report export.

mod config;
mod plotdata;
mod sweep;

pub use config::{DataConfig, DataSource, ExperimentConfig, PruningConfig, TrainConfig, PRESETS};
pub use plotdata::{emit_plotdata, plotdata, PlotKind};
pub use sweep::{
    cell_name, load_report, run_sweep, run_sweep_on, sweep_cells, worker_count, Aggregate, CellMetrics, CellResult,
    SweepReport, AGGREGATE_HEADER, SUMMARY_HEADER, WORKERS_ENV,
};
