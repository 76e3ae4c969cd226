//! The operations API against a live loopback market.

use std::path::Path;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use ramp_core::harness::{LiveMarket, LiveOptions, ScenarioConfig};
use ramp_core::ops::{new_auction_body, OpsOptions, OpsServer, UserHandle};
use ramp_core::rfql::RfqRequest;
use ramp_core::user::{ApprovalMode, AuctionConfig};
use ramp_core::{Money, Timestamp};

fn small_scenario() -> ScenarioConfig {
    let mut cfg = ScenarioConfig::builtin();
    cfg.resources.retain(|r| ["atlas1", "intrepid4", "ricc3", "curie3"].contains(&r.name.as_str()));
    cfg
}

struct Fixture {
    _market: LiveMarket,
    server: OpsServer,
}

fn start(registry: bool) -> Fixture {
    let opts = LiveOptions {
        registry,
        heartbeat_ms: 200,
        ..LiveOptions::default()
    };
    let market = LiveMarket::start(&small_scenario(), Path::new("."), &opts).unwrap();
    let ops = OpsOptions {
        resources: if registry { Vec::new() } else { market.resource_ids() },
        ..OpsOptions::default()
    };
    let handle: Arc<dyn UserHandle> = market.user.clone();
    let server = OpsServer::start(handle, market.user_id.clone(), "127.0.0.1:0", ops).unwrap();
    if registry {
        // Let every resource register and heartbeat once.
        thread::sleep(Duration::from_millis(400));
    }
    Fixture { _market: market, server }
}

fn get(f: &Fixture, path: &str) -> (u16, Value) {
    finish(ureq::get(&format!("{}{path}", f.server.url())).call())
}

fn post(f: &Fixture, path: &str, body: Value) -> (u16, Value) {
    finish(ureq::post(&format!("{}{path}", f.server.url())).send_json(body))
}

fn finish(r: Result<ureq::Response, ureq::Error>) -> (u16, Value) {
    match r {
        Ok(resp) => (resp.status(), resp.into_json().unwrap_or(Value::Null)),
        Err(ureq::Error::Status(code, resp)) => (code, resp.into_json().unwrap_or(Value::Null)),
        Err(e) => panic!("transport error: {e}"),
    }
}

fn wait_for(f: &Fixture, path: &str, what: &str, done: impl Fn(&Value) -> bool) -> Value {
    let until = Instant::now() + Duration::from_secs(20);
    loop {
        let (code, body) = get(f, path);
        if code == 200 && done(&body) {
            return body;
        }
        assert!(Instant::now() < until, "timed out waiting for {what}: {body}");
        thread::sleep(Duration::from_millis(50));
    }
}

fn request(price: i64) -> Value {
    let start = Timestamp::now().plus_secs(300);
    let req = RfqRequest::new("job", Money::from_units(price), 16, 3600, start.plus_secs(86_400)).with_earliest_start(start);
    let cfg = AuctionConfig::new(2, 300);
    new_auction_body(&[req], "ops-test", &cfg)
}

#[test]
fn auction_purchase_cancel_and_balances() {
    let f = start(true);

    let (code, resources) = get(&f, "/resources");
    assert_eq!(code, 200);
    let list = resources.as_array().unwrap();
    assert_eq!(list.len(), 4, "{resources}");
    assert!(list.iter().all(|r| r["source"] == "registry" && r["alive"] == true));

    let (code, created) = post(&f, "/auctions", request(70));
    assert_eq!(code, 201, "{created}");
    let id = created["auction_id"].as_str().unwrap().to_string();

    let (code, all) = get(&f, "/auctions");
    assert_eq!(code, 200);
    assert!(all.as_array().unwrap().iter().any(|a| a["auction_id"] == id.as_str()));

    let detail = wait_for(&f, &format!("/auctions/{id}"), "auction to finish", |a| a["phase"] == "done" || a["phase"] == "failed");
    assert_eq!(detail["phase"], "done", "{detail}");
    assert_eq!(detail["units"][0]["rounds"].as_array().unwrap().len(), 2);
    assert_eq!(detail["units"][0]["confirmed"], true);

    let (code, reservations) = get(&f, "/reservations");
    assert_eq!(code, 200);
    let rid = reservations[0]["reservation_id"].as_str().unwrap().to_string();
    assert_eq!(reservations[0]["status"], "confirmed");

    let statement = wait_for(&f, "/accounts/user1", "settlement", |s| {
        s["entries"].as_array().is_some_and(|e| e.iter().any(|x| x["kind"] == "settlement"))
    });
    let after_purchase = statement["balance"].clone();

    let (code, _) = get(&f, "/accounts/bank");
    assert_eq!(code, 404, "other principals' accounts are hidden");

    let (code, cancelled) = post(&f, &format!("/reservations/{rid}/cancel"), json!({}));
    assert_eq!(code, 202, "{cancelled}");
    wait_for(&f, "/reservations", "re-credit", |r| r[0]["status"] == "cancelled" && r[0]["re_credited"] == true);
    let statement = wait_for(&f, "/accounts/user1", "re-credit entry", |s| {
        s["entries"].as_array().is_some_and(|e| e.iter().any(|x| x["kind"] == "re-credit"))
    });
    assert_ne!(statement["balance"], after_purchase);

    let (code, again) = post(&f, &format!("/reservations/{rid}/cancel"), json!({}));
    assert_eq!(code, 409, "{again}");
    let (code, _) = post(&f, "/reservations/nope/cancel", json!({}));
    assert_eq!(code, 404);
}

#[test]
fn manual_approval_moves_the_auction_to_phase_one() {
    let f = start(true);
    let mut body = request(10);
    body["config"]["approval"] = json!(ApprovalMode::ManualBestOfferOnly);
    let (code, created) = post(&f, "/auctions", body);
    assert_eq!(code, 201, "{created}");
    let id = created["auction_id"].as_str().unwrap().to_string();

    let waiting = wait_for(&f, &format!("/auctions/{id}"), "approval request", |a| {
        a["awaiting_approval"].as_array().is_some_and(|u| !u.is_empty())
    });
    assert_eq!(waiting["phase"], "awaiting-approval");
    let offer = &waiting["units"][0]["approval"]["offer"];
    assert_eq!(offer["price"], json!(Money::from_units(25)), "{waiting}");

    let (code, _) = post(&f, &format!("/auctions/{id}/units/7/approve"), json!({"decision": "accept"}));
    assert_eq!(code, 404);
    let (code, _) = post(&f, &format!("/auctions/{id}/units/0/approve"), json!({"decision": "maybe"}));
    assert_eq!(code, 400);

    let (code, summary) = post(&f, &format!("/auctions/{id}/units/0/approve"), json!({"decision": "accept"}));
    assert_eq!(code, 200, "{summary}");
    assert!(
        ["phase-one", "phase-two", "done"].contains(&summary["phase"].as_str().unwrap()),
        "{summary}"
    );
    let done = wait_for(&f, &format!("/auctions/{id}"), "commit", |a| a["phase"] == "done" || a["phase"] == "failed");
    assert_eq!(done["phase"], "done", "{done}");

    let (code, _) = post(&f, &format!("/auctions/{id}/units/0/approve"), json!({"decision": "accept"}));
    assert_eq!(code, 409, "a finished auction takes no approvals");
}

#[test]
fn errors_map_to_statuses() {
    let f = start(false);

    let (code, resources) = get(&f, "/resources");
    assert_eq!(code, 200);
    assert!(resources.as_array().unwrap().iter().all(|r| r["source"] == "static"));

    let (code, body) = post(&f, "/auctions", json!({"rfql": "<not-rfql", "config": {"rounds": 1, "round_interval_ms": 100}}));
    assert_eq!(code, 400, "{body}");
    let (code, _) = post(&f, "/auctions", json!({"config": {}}));
    assert_eq!(code, 400);
    let mut zero_rounds = request(70);
    zero_rounds["config"]["rounds"] = json!(0);
    let (code, _) = post(&f, "/auctions", zero_rounds);
    assert_eq!(code, 400);

    let (code, _) = get(&f, "/auctions/none");
    assert_eq!(code, 404);
    let (code, _) = post(&f, "/auctions/none/units/0/approve", json!({"decision": "accept"}));
    assert_eq!(code, 404);
    let (code, _) = get(&f, "/nowhere");
    assert_eq!(code, 404);
    let (code, _) = post(&f, "/resources", json!({}));
    assert_eq!(code, 405);

    let (code, created) = post(&f, "/auctions", request(70));
    assert_eq!(code, 201);
    let id = created["auction_id"].as_str().unwrap();
    let (code, body) = post(&f, &format!("/auctions/{id}/units/0/approve"), json!({"decision": "accept"}));
    assert_eq!(code, 409, "auto auctions take no approvals: {body}");
}
