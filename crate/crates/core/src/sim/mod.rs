//! Scenario configuration, the event loop and scheme comparison.

pub mod compare;
pub mod config;
pub mod edge;
pub mod queue;
pub mod report;
pub mod runner;
pub mod spikes;

pub use compare::{compare_schemes, Comparison};
pub use config::{ScenarioConfig, Scheme};
pub use report::MetricsReport;
pub use runner::{run_replay, run_scenario, ReplayInputs, SimError};
