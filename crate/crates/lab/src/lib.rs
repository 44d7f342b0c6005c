//! Experiment front end: declarative specs, run directories, comparison
//! reports and plot-ready inspection outputs.

pub mod inspect;
pub mod metrics;
pub mod report;
pub mod runner;
pub mod spec;

pub use metrics::RunMetrics;
pub use runner::{run_spec, Existing, RunOptions, RunSet};
pub use spec::ExperimentSpec;
