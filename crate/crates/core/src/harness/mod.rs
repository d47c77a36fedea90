//! Benchmark harness: configuration, workloads, execution, and reporting.

pub mod config;
pub mod embeddings;
pub mod report;
pub mod runner;
pub mod workload;

pub use config::{load_config, load_preset, parse_config, preset_names, RunConfig};
pub use report::{compare_reports, CompareReport, RunReport};
pub use runner::{run, run_to_report_path, HarnessError};
