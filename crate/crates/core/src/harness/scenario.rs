//! Scenario files: a resource set, a list of workloads and run settings.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::market::{Market, Timing};
use super::synth::constant_load;
use crate::agent::TranscriptRecord;
use crate::money::Money;
use crate::pricing::{PricingConfig, PricingError};
use crate::protocol::AgentId;
use crate::queuesim::{MachineModel, QueueError, SimClock, SwfError, SwfLog};
use crate::rfql::{RfqDocument, RfqRequest, ResourceProfile};
use crate::time::Timestamp;
use crate::user::{ApprovalMode, AuctionConfig, Phase};

/// Machines the built-in resource set is modelled on: name, cores, cores per node.
pub const BASE_SYSTEMS: [(&str, u64, u64); 5] = [
    ("LLNL Atlas", 9216, 8),
    ("LLNL Thunder", 4008, 4),
    ("ANL Intrepid", 163_840, 4),
    ("RICC", 8192, 8),
    ("CEA CURIE", 93_312, 16),
];

pub fn base_system(name: &str) -> Option<(u64, u64)> {
    BASE_SYSTEMS.iter().find(|(n, _, _)| *n == name).map(|(_, c, n)| (*c, *n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceSpec {
    pub name: String,
    pub base_system: String,
    /// Seconds into the machine log at which the simulation starts.
    pub time_offset: i64,
    pub start_price: Money,
    pub min_price: Money,
    #[serde(default = "default_anticipated_rounds")]
    pub anticipated_rounds: u32,
    /// SWF log; relative paths resolve against the scenario file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log: Option<PathBuf>,
    /// Constant synthetic background load, used when no log is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub load: Option<f64>,
}

fn default_anticipated_rounds() -> u32 {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub name: String,
    pub cores: u32,
    /// Earliest start, relative to submission.
    pub start_delay_secs: i64,
    pub price: Money,
    #[serde(default = "default_wall_time")]
    pub wall_time: u64,
    #[serde(default = "default_rounds")]
    pub rounds: u32,
    #[serde(default = "default_units")]
    pub units: usize,
}

fn default_wall_time() -> u64 {
    3600
}
fn default_rounds() -> u32 {
    3
}
fn default_units() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub resources: Vec<ResourceSpec>,
    pub workloads: Vec<WorkloadSpec>,
    #[serde(default = "default_repetitions")]
    pub repetitions: u32,
    pub round_interval_secs: f64,
    #[serde(default = "default_approval")]
    pub approval: ApprovalMode,
    /// Deadline, measured from the earliest start.
    #[serde(default = "default_deadline")]
    pub deadline_after_start_secs: i64,
    /// Idle time between consecutive workloads.
    #[serde(default = "default_gap")]
    pub gap_secs: i64,
    #[serde(default)]
    pub timing: Timing,
    /// Simulation start as RFC 3339.
    #[serde(default = "default_start")]
    pub start: String,
    /// How long the synthetic logs extend past the start.
    #[serde(default = "default_horizon")]
    pub horizon_secs: i64,
}

fn default_repetitions() -> u32 {
    1
}
fn default_approval() -> ApprovalMode {
    ApprovalMode::Auto
}
fn default_deadline() -> i64 {
    24 * 3600
}
fn default_gap() -> i64 {
    60
}
fn default_start() -> String {
    "2012-06-01T00:00:00Z".into()
}
fn default_horizon() -> i64 {
    14 * 24 * 3600
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("reading scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing scenario: {0}")]
    Json(#[from] serde_json::Error),
    #[error("resource {resource}: {message}")]
    Resource { resource: String, message: String },
    #[error("bad start time {0:?}")]
    BadStart(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Swf(#[from] SwfError),
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error(transparent)]
    Pricing(#[from] PricingError),
}

/// Price bands and log offsets of the twenty-resource market.
const MARKET: [(&str, &str, i64, i64, i64); 20] = [
    ("atlas1", "LLNL Atlas", 3_370_000, 33, 25),
    ("atlas2", "LLNL Atlas", 1_370_000, 33, 26),
    ("thunder1", "LLNL Thunder", 250_000, 70, 40),
    ("thunder2", "LLNL Thunder", 1_300_000, 75, 60),
    ("thunder3", "LLNL Thunder", 130_000, 70, 35),
    ("thunder4", "LLNL Thunder", 450_000, 75, 50),
    ("intrepid1", "ANL Intrepid", 50_000, 55, 35),
    ("intrepid2", "ANL Intrepid", 1_500_000, 65, 25),
    ("intrepid3", "ANL Intrepid", 15_000_000, 53, 25),
    ("intrepid4", "ANL Intrepid", 750_000, 55, 30),
    ("intrepid5", "ANL Intrepid", 2_500_000, 65, 28),
    ("intrepid6", "ANL Intrepid", 90_000, 53, 30),
    ("ricc1", "RICC", 50_000, 40, 25),
    ("ricc2", "RICC", 7_570_000, 45, 25),
    ("ricc3", "RICC", 500_000, 45, 25),
    ("ricc4", "RICC", 757_000, 45, 30),
    ("curie1", "CEA CURIE", 150_000, 80, 40),
    ("curie2", "CEA CURIE", 1_375_000, 80, 65),
    ("curie3", "CEA CURIE", 350_000, 80, 30),
    ("curie4", "CEA CURIE", 2_375_000, 70, 65),
];

/// Background loads of the built-in market, one per resource.
const MARKET_LOADS: [f64; 20] = [
    0.62, 0.48, 0.71, 0.35, 0.55, 0.80, 0.44, 0.66, 0.52, 0.30, 0.74, 0.58, 0.40, 0.68, 0.25, 0.50, 0.60, 0.45, 0.70, 0.38,
];

/// Job name, cores, earliest start delay and price of the thirteen workloads.
const WORKLOADS: [(&str, u32, i64, i64); 13] = [
    ("exp1", 16, 300, 70),
    ("exp2", 16, 3600, 55),
    ("exp3", 16, 43_200, 35),
    ("exp4", 256, 300, 50),
    ("exp5", 256, 3600, 30),
    ("exp6", 256, 43_200, 25),
    ("exp7", 1024, 3600, 55),
    ("exp8", 1024, 43_200, 35),
    ("exp9", 4096, 3600, 55),
    ("exp10", 4096, 43_200, 35),
    ("exp11", 20_480, 300, 80),
    ("exp12", 20_480, 3600, 55),
    ("exp13", 20_480, 43_200, 35),
];

pub fn builtin_resources() -> Vec<ResourceSpec> {
    MARKET
        .iter()
        .zip(MARKET_LOADS)
        .map(|(&(name, base, offset, sp, mp), load)| ResourceSpec {
            name: name.into(),
            base_system: base.into(),
            time_offset: offset,
            start_price: Money::from_units(sp),
            min_price: Money::from_units(mp),
            anticipated_rounds: default_anticipated_rounds(),
            log: None,
            load: Some(load),
        })
        .collect()
}

pub fn builtin_workloads() -> Vec<WorkloadSpec> {
    WORKLOADS
        .iter()
        .map(|&(name, cores, delay, price)| WorkloadSpec {
            name: name.into(),
            cores,
            start_delay_secs: delay,
            price: Money::from_units(price),
            wall_time: default_wall_time(),
            rounds: default_rounds(),
            units: default_units(),
        })
        .collect()
}

impl ScenarioConfig {
    /// The twenty-resource market with the thirteen workloads, three
    /// repetitions and three rounds of fifteen seconds.
    pub fn builtin() -> Self {
        ScenarioConfig {
            name: "market".into(),
            resources: builtin_resources(),
            workloads: builtin_workloads(),
            repetitions: 3,
            round_interval_secs: 15.0,
            approval: default_approval(),
            deadline_after_start_secs: default_deadline(),
            gap_secs: default_gap(),
            timing: Timing::default(),
            start: default_start(),
            horizon_secs: default_horizon(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn start_time(&self) -> Result<Timestamp, ScenarioError> {
        Timestamp::parse_rfc3339(&self.start).ok_or_else(|| ScenarioError::BadStart(self.start.clone()))
    }

    pub fn validate(&self, base_dir: &Path) -> Result<(), ScenarioError> {
        if self.round_interval_secs <= 0.0 {
            return Err(ScenarioError::Invalid("round interval must be positive".into()));
        }
        for r in &self.resources {
            let fail = |message: String| ScenarioError::Resource {
                resource: r.name.clone(),
                message,
            };
            if r.time_offset < 0 {
                return Err(fail("time offset must not be negative".into()));
            }
            if base_system(&r.base_system).is_none() {
                return Err(fail(format!("unknown base system {:?}", r.base_system)));
            }
            PricingConfig::new(r.start_price, r.min_price, r.anticipated_rounds)?;
            match (&r.log, r.load) {
                (Some(log), _) => {
                    let p = base_dir.join(log);
                    std::fs::metadata(&p).map_err(|e| fail(format!("{}: {e}", p.display())))?;
                }
                (None, Some(l)) if (0.0..=1.0).contains(&l) => {}
                (None, Some(l)) => return Err(fail(format!("load {l} outside [0, 1]"))),
                (None, None) => return Err(fail("needs a log or a synthetic load".into())),
            }
        }
        Ok(())
    }

    pub fn round_interval_ms(&self) -> i64 {
        (self.round_interval_secs * 1000.0).round() as i64
    }

    /// The request document for one workload submitted at `now`.
    pub fn document(&self, w: &WorkloadSpec, now: Timestamp, tag: &str) -> RfqDocument {
        let start = now.plus_secs(w.start_delay_secs);
        let deadline = start.plus_secs(self.deadline_after_start_secs);
        let requests = (0..w.units.max(1))
            .map(|u| RfqRequest::new(format!("{}-u{u}", w.name), w.price, w.cores, w.wall_time, deadline).with_earliest_start(start))
            .collect();
        RfqDocument::new(format!("{}-{tag}", w.name), requests)
    }
}

/// A scenario resource ready to be handed to an agent.
pub struct ResourceParts {
    pub profile: ResourceProfile,
    pub pricing: PricingConfig,
    pub queue: MachineModel,
}

/// Builds the queue, profile and pricing of one resource whose log replay
/// starts at `start`.
pub fn resource_parts(cfg: &ScenarioConfig, r: &ResourceSpec, base_dir: &Path, start: Timestamp) -> Result<ResourceParts, ScenarioError> {
    let (cores, node_cores) = base_system(&r.base_system).ok_or_else(|| ScenarioError::Resource {
        resource: r.name.clone(),
        message: format!("unknown base system {:?}", r.base_system),
    })?;
    let log = match &r.log {
        Some(p) => SwfLog::load(base_dir.join(p))?,
        None => constant_load(
            &r.base_system,
            cores,
            r.load.unwrap_or(0.0),
            r.time_offset.saturating_sub(7 * 24 * 3600).max(0),
            r.time_offset + cfg.horizon_secs,
            6 * 3600,
        ),
    };
    let clock = SimClock::new(start, r.time_offset)?;
    Ok(ResourceParts {
        profile: ResourceProfile::generic(cores / node_cores, node_cores),
        pricing: PricingConfig::new(r.start_price, r.min_price, r.anticipated_rounds)?,
        queue: MachineModel::new(r.name.clone(), cores, Arc::new(log), clock)?,
    })
}

/// Builds the market for a scenario: bank, resources with their queues, and
/// one well-funded user.
pub fn build_market(cfg: &ScenarioConfig, base_dir: &Path) -> Result<(Market, AgentId), ScenarioError> {
    build_market_funded(cfg, base_dir, Some(Money::from_units(1_000_000_000)))
}

/// As [`build_market`], depositing `funds` for the user when given.
pub fn build_market_funded(cfg: &ScenarioConfig, base_dir: &Path, funds: Option<Money>) -> Result<(Market, AgentId), ScenarioError> {
    cfg.validate(base_dir)?;
    let start = cfg.start_time()?;
    let mut market = Market::new(start, cfg.timing);
    for r in &cfg.resources {
        let parts = resource_parts(cfg, r, base_dir, start)?;
        market.add_resource(&r.name, parts.profile, parts.pricing, Box::new(parts.queue), |_| {});
    }
    let user = market.add_user("user1", funds);
    Ok((market, user))
}

/// One auction as submitted by [`run_scenario`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub repetition: u32,
    pub workload: String,
    pub auction_id: Option<String>,
    pub phase: Option<Phase>,
    pub error: Option<String>,
}

pub struct ScenarioRun {
    pub submissions: Vec<Submission>,
    pub transcript: Vec<TranscriptRecord>,
    pub market: Market,
}

/// Runs every workload in order, repeated, on the virtual clock. With
/// `rounds` set it overrides the per-workload round count.
pub fn run_scenario(cfg: &ScenarioConfig, base_dir: &Path, rounds: Option<u32>) -> Result<ScenarioRun, ScenarioError> {
    let (mut market, user) = build_market(cfg, base_dir)?;
    let mut submissions = Vec::new();
    for rep in 0..cfg.repetitions {
        for w in &cfg.workloads {
            let doc = cfg.document(w, market.now(), &format!("r{rep}"));
            let config = AuctionConfig {
                approval: cfg.approval,
                ..AuctionConfig::new(rounds.unwrap_or(w.rounds), cfg.round_interval_ms())
            };
            let mut sub = Submission {
                repetition: rep,
                workload: w.name.clone(),
                auction_id: None,
                phase: None,
                error: None,
            };
            match market.start_auction(&user, doc, config, false) {
                Ok(id) => {
                    let limit = (rounds.unwrap_or(w.rounds) as i64 + 2) * cfg.round_interval_ms() + 600_000;
                    let state = market.run_auction(&user, &id, 5_000, limit);
                    sub.phase = Some(state.phase);
                    sub.auction_id = Some(id);
                }
                Err(e) => sub.error = Some(e.to_string()),
            }
            submissions.push(sub);
            market.sim.run_for(cfg.gap_secs * 1000);
        }
    }
    let transcript = market.transcript().to_vec();
    Ok(ScenarioRun {
        submissions,
        transcript,
        market,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_market_matches_the_published_setup() {
        let cfg = ScenarioConfig::builtin();
        assert_eq!(cfg.resources.len(), 20);
        assert_eq!(cfg.workloads.len(), 13);
        assert!(cfg.resources.iter().all(|r| r.time_offset >= 50_000));
        assert!(cfg.resources.iter().all(|r| r.min_price >= Money::from_units(25)));
        cfg.validate(Path::new(".")).unwrap();
    }

    #[test]
    fn scenario_round_trips_through_json() {
        let cfg = ScenarioConfig::builtin();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ScenarioConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn documents_start_after_the_delay_and_end_a_day_later() {
        let cfg = ScenarioConfig::builtin();
        let now = Timestamp::from_secs(1_000_000);
        let doc = cfg.document(&cfg.workloads[2], now, "t");
        let r = &doc.requests[0];
        assert_eq!(r.earliest_start(), Some(now.plus_secs(43_200)));
        assert_eq!(r.deadline(), Some(now.plus_secs(43_200 + 86_400)));
        assert_eq!(r.total_cores, Some(16));
    }

    #[test]
    fn negative_offsets_and_missing_logs_are_rejected() {
        let mut cfg = ScenarioConfig::builtin();
        cfg.resources[0].time_offset = -1;
        assert!(cfg.validate(Path::new(".")).is_err());
        let mut cfg = ScenarioConfig::builtin();
        cfg.resources[0].load = None;
        cfg.resources[0].log = Some("does-not-exist.swf".into());
        assert!(cfg.validate(Path::new(".")).is_err());
    }
}
