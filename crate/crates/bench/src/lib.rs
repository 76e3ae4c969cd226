//! Fixtures shared by the benchmarks.

use std::path::Path;

use ramp_core::harness::{build_market, ScenarioConfig};
use ramp_core::protocol::{new_conversation_id, AclMessage, Content, Performative, RfqContent, ONTOLOGY};
use ramp_core::rfql::{RfqDocument, RfqRequest};
use ramp_core::{Money, Timestamp};

pub fn request(i: usize) -> RfqRequest {
    let start = Timestamp::from_secs(1_800_000_000);
    RfqRequest::new(format!("u{i}"), Money::from_units(70), 64, 3600, start.plus_secs(86_400)).with_earliest_start(start)
}

pub fn document(units: usize) -> RfqDocument {
    RfqDocument::new("bench", (0..units).map(request).collect())
}

pub fn cfp() -> AclMessage {
    AclMessage {
        performative: Performative::CallForProposals,
        sender: "user1".into(),
        receiver: "atlas1".into(),
        conversation_id: new_conversation_id("A1", 0),
        in_reply_to: None,
        message_id: "user1#1".into(),
        ontology: ONTOLOGY.into(),
        sent_at: Timestamp::from_secs(1_800_000_000),
        content: Content::Rfq(RfqContent {
            auction_id: "A1".into(),
            unit_index: 0,
            round: 1,
            request: request(0),
            offer_expires_at: Timestamp::from_secs(1_800_000_100),
        }),
    }
}

/// Runs one auction of `units` units and `rounds` rounds on the built-in
/// market and returns its final phase name.
pub fn simulated_auction(units: usize, rounds: u32) -> &'static str {
    let cfg = ScenarioConfig::builtin();
    let (mut market, user) = build_market(&cfg, Path::new(".")).expect("built-in scenario");
    let mut w = ramp_core::harness::experiments::reference_workload();
    w.units = units;
    let doc = cfg.document(&w, market.now(), "bench");
    let config = ramp_core::AuctionConfig::new(rounds, cfg.round_interval_ms());
    let id = market.start_auction(&user, doc, config, false).expect("auction starts");
    market.run_auction(&user, &id, 5_000, 3_600_000).phase.name()
}
