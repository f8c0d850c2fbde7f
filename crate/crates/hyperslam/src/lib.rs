//! SLAM pipeline around the hyper-primitive engine: dataset ingestion,
//! configuration, runtime orchestration, evaluation metrics and output
//! serialization.

pub mod config;
pub mod dataset;
pub mod io;
pub mod metrics;
pub mod report;
pub mod synth;
pub mod system;

pub use config::SystemConfig;
pub use report::RunReport;
pub use system::{run_slam, PipelineError};
