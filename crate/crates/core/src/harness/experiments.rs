//! Scaling experiments on the virtual clock. Each returns the metrics of the
//! auctions it ran, tagged with the varied parameter.

use std::path::Path;

use super::metrics::{compute_metrics, Metrics};
use super::scenario::{build_market, ScenarioConfig, ScenarioError, WorkloadSpec};
use crate::money::Money;
use crate::protocol::AgentId;
use crate::user::AuctionConfig;

/// The single-unit request used by the scaling experiments.
pub fn reference_workload() -> WorkloadSpec {
    WorkloadSpec {
        name: "probe".into(),
        cores: 16,
        start_delay_secs: 300,
        price: Money::from_units(70),
        wall_time: 3600,
        rounds: 3,
        units: 1,
    }
}

fn settle_limit(cfg: &ScenarioConfig, rounds: u32) -> i64 {
    (rounds as i64 + 2) * cfg.round_interval_ms() + 600_000
}

/// Runs `repetitions` consecutive auctions of `workload` for each round
/// count, each round count on a fresh market.
pub fn rounds_curve(
    cfg: &ScenarioConfig,
    base_dir: &Path,
    workload: &WorkloadSpec,
    rounds: impl IntoIterator<Item = u32>,
    repetitions: u32,
) -> Result<Metrics, ScenarioError> {
    let mut all = Metrics::default();
    for n in rounds {
        let (mut market, user) = build_market(cfg, base_dir)?;
        for rep in 0..repetitions {
            let doc = cfg.document(workload, market.now(), &format!("n{n}r{rep}"));
            let ac = AuctionConfig {
                approval: cfg.approval,
                ..AuctionConfig::new(n, cfg.round_interval_ms())
            };
            let id = market.start_auction(&user, doc, ac, false).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
            market.run_auction(&user, &id, 5_000, settle_limit(cfg, n));
            market.sim.run_for(cfg.gap_secs * 1000);
        }
        merge(&mut all, compute_metrics(market.transcript()));
    }
    Ok(all)
}

/// One auction per unit count, each on a fresh market.
pub fn units_curve(
    cfg: &ScenarioConfig,
    base_dir: &Path,
    workload: &WorkloadSpec,
    units: impl IntoIterator<Item = usize>,
    repetitions: u32,
) -> Result<Metrics, ScenarioError> {
    let mut all = Metrics::default();
    for u in units {
        let (mut market, user) = build_market(cfg, base_dir)?;
        let w = WorkloadSpec {
            units: u,
            ..workload.clone()
        };
        for rep in 0..repetitions {
            let doc = cfg.document(&w, market.now(), &format!("u{u}r{rep}"));
            let ac = AuctionConfig::new(w.rounds, cfg.round_interval_ms());
            let id = market.start_auction(&user, doc, ac, false).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
            market.run_auction(&user, &id, 5_000, settle_limit(cfg, w.rounds));
            market.sim.run_for(cfg.gap_secs * 1000);
        }
        merge(&mut all, compute_metrics(market.transcript()));
    }
    Ok(all)
}

/// `k` users each start one auction at the same instant, for each `k`.
/// Returns per-`k` metrics.
pub fn users_curve(
    cfg: &ScenarioConfig,
    base_dir: &Path,
    workload: &WorkloadSpec,
    users: impl IntoIterator<Item = usize>,
) -> Result<Vec<(usize, Metrics)>, ScenarioError> {
    let mut out = Vec::new();
    for k in users {
        let (mut market, first) = build_market(cfg, base_dir)?;
        let mut ids: Vec<AgentId> = vec![first];
        for i in 1..k {
            ids.push(market.add_user(&format!("user{}", i + 1), Some(Money::from_units(1_000_000_000))));
        }
        let mut started = Vec::new();
        for (i, u) in ids.iter().enumerate() {
            let doc = cfg.document(workload, market.now(), &format!("k{k}u{i}"));
            let ac = AuctionConfig::new(workload.rounds, cfg.round_interval_ms());
            let id = market.start_auction(u, doc, ac, false).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
            started.push((u.clone(), id));
        }
        market.run_all(&started, 5_000, settle_limit(cfg, workload.rounds));
        out.push((k, compute_metrics(market.transcript())));
    }
    Ok(out)
}

fn merge(into: &mut Metrics, from: Metrics) {
    into.auctions.extend(from.auctions);
    into.offers.extend(from.offers);
    into.spot.extend(from.spot);
}
