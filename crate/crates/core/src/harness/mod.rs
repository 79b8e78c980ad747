//! Configuration, metrics, plots, reports and the end-to-end pipeline.

pub mod commands;
pub mod config;
pub mod metrics;
pub mod pipeline;
pub mod plots;
pub mod report;

pub use config::ExperimentConfig;
pub use metrics::MetricsRow;
pub use pipeline::{run_pipeline, PipelineOutput};
pub use report::RunSummary;
