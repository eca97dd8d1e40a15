//! Reporting for dafec runs.
//!
//! This crate is the only place that reads hidden gold-label sidecars. The
//! core library can write nothing it cannot also train on, and its dataset
//! loader refuses sidecar files, so gold labels reach metrics and plots only
//! through here.

pub mod gold;
pub mod plots;

pub use gold::{cluster_fmi, fill_fmi, read_gold_sidecar, write_gold_sidecar, GoldLabels};
pub use plots::{ablation_table, cluster_bars_csv, emit_plot_data, lambda_csv, loss_trace_csv, pca_scatter_csv, PlotRun};
