//! Experiment orchestration: simulated and loopback markets, scenario files,
//! synthetic workloads and metrics.

pub mod experiments;
pub mod live;
pub mod market;
pub mod metrics;
pub mod scenario;
pub mod synth;

pub use live::{LiveMarket, LiveOptions};
pub use market::{Market, Timing};
pub use metrics::{compute_metrics, write_csvs, AuctionRecord, Metrics};
pub use scenario::{build_market, build_market_funded, run_scenario, ResourceSpec, ScenarioConfig, ScenarioRun, Submission, WorkloadSpec};
