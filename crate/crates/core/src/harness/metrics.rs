//! Metrics computed purely from transcripts, and their CSV exports.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{self, BufRead};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::{AgentEvent, Direction, TranscriptRecord};
use crate::money::Money;
use crate::protocol::{parse_conversation_id, AgentId, Content, Performative};
use crate::time::Timestamp;

/// A conforming or best offer as received by the user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReceivedOffer {
    pub unit: usize,
    pub round: u32,
    pub resource_id: AgentId,
    pub price: Money,
    pub meets_requirements: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuctionRecord {
    pub auction_id: String,
    pub user: AgentId,
    pub units: usize,
    pub rounds: u32,
    pub request_prices: Vec<Money>,
    pub offers: Vec<ReceivedOffer>,
    /// Mean conforming offer per round, over all units.
    pub round_mean_offer: Vec<Option<f64>>,
    pub winners: Vec<Option<AgentId>>,
    pub winning_prices: Vec<Option<Money>>,
    pub outcome: String,
    /// Round open to the last reply that answered it.
    pub round_durations_ms: Vec<i64>,
    pub finalize_ms: Option<i64>,
    pub total_ms: Option<i64>,
    /// CFP sent to reply received, one per answered CFP.
    pub response_ms: Vec<i64>,
    pub started_at: Timestamp,
    pub finished_at: Option<Timestamp>,
    pub complete: bool,
}

impl AuctionRecord {
    pub fn succeeded(&self) -> bool {
        self.complete && self.outcome == "all-confirmed"
    }

    /// Mean winning price over units; `None` unless every unit was won.
    pub fn sale_price(&self) -> Option<f64> {
        if !self.succeeded() || self.winning_prices.iter().any(Option::is_none) {
            return None;
        }
        let n = self.winning_prices.len().max(1) as f64;
        Some(self.winning_prices.iter().flatten().map(|p| p.as_f64()).sum::<f64>() / n)
    }

    pub fn mean_round_duration_ms(&self) -> Option<f64> {
        mean(self.round_durations_ms.iter().map(|d| *d as f64))
    }

    pub fn mean_response_ms(&self) -> Option<f64> {
        mean(self.response_ms.iter().map(|d| *d as f64))
    }
}

/// One offer as logged by the resource that made it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfferSample {
    pub at: Timestamp,
    pub resource_id: AgentId,
    pub auction_id: String,
    pub unit: usize,
    pub round: u32,
    pub requested_price: Money,
    pub price: Money,
    pub meets_requirements: bool,
    pub load: f64,
    pub attractiveness: Money,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpotSample {
    pub at: Timestamp,
    pub resource_id: AgentId,
    pub load: f64,
    pub attractiveness: Money,
    pub price: Money,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auctions: Vec<AuctionRecord>,
    pub offers: Vec<OfferSample>,
    pub spot: Vec<SpotSample>,
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

#[derive(Default)]
struct Builder {
    record: Option<AuctionRecord>,
    round_open: BTreeMap<u32, Timestamp>,
    round_last: BTreeMap<u32, Timestamp>,
    bidding_closed: Option<Timestamp>,
}

/// Aggregates transcripts. Auctions without a finish event are kept but
/// marked incomplete.
pub fn compute_metrics(records: &[TranscriptRecord]) -> Metrics {
    let mut auctions: BTreeMap<String, Builder> = BTreeMap::new();
    let mut cfps: HashMap<String, (String, Timestamp)> = HashMap::new();
    let mut metrics = Metrics::default();
    for rec in records {
        match rec {
            TranscriptRecord::Event { at, agent, event } => match event {
                AgentEvent::AuctionStarted {
                    auction_id,
                    units,
                    rounds,
                    request_prices,
                    ..
                } => {
                    auctions.insert(
                        auction_id.clone(),
                        Builder {
                            record: Some(AuctionRecord {
                                auction_id: auction_id.clone(),
                                user: agent.clone(),
                                units: *units,
                                rounds: *rounds,
                                request_prices: request_prices.clone(),
                                offers: Vec::new(),
                                round_mean_offer: Vec::new(),
                                winners: vec![None; *units],
                                winning_prices: vec![None; *units],
                                outcome: String::new(),
                                round_durations_ms: Vec::new(),
                                finalize_ms: None,
                                total_ms: None,
                                response_ms: Vec::new(),
                                started_at: *at,
                                finished_at: None,
                                complete: false,
                            }),
                            ..Builder::default()
                        },
                    );
                }
                AgentEvent::RoundOpened { auction_id, round, .. } => {
                    if let Some(b) = auctions.get_mut(auction_id) {
                        b.round_open.insert(*round, *at);
                    }
                }
                AgentEvent::RoundClosed {
                    auction_id,
                    round,
                    last_reply_at,
                    ..
                } => {
                    if let (Some(b), Some(t)) = (auctions.get_mut(auction_id), last_reply_at) {
                        let e = b.round_last.entry(*round).or_insert(*t);
                        *e = (*e).max(*t);
                    }
                }
                AgentEvent::BiddingClosed { auction_id } => {
                    if let Some(b) = auctions.get_mut(auction_id) {
                        b.bidding_closed = Some(*at);
                    }
                }
                AgentEvent::AuctionFinished {
                    auction_id,
                    outcome,
                    winners,
                } => {
                    if let Some(r) = auctions.get_mut(auction_id).and_then(|b| b.record.as_mut()) {
                        r.outcome = outcome.clone();
                        r.finished_at = Some(*at);
                        r.complete = true;
                        for (i, w) in winners.iter().enumerate().take(r.units) {
                            r.winners[i] = w.as_ref().map(|w| w.resource_id.clone());
                            r.winning_prices[i] = w.as_ref().map(|w| w.price);
                        }
                    }
                }
                AgentEvent::OfferMade {
                    auction_id,
                    unit,
                    round,
                    requested_price,
                    price,
                    meets_requirements,
                    load,
                    attractiveness,
                    ..
                } => metrics.offers.push(OfferSample {
                    at: *at,
                    resource_id: agent.clone(),
                    auction_id: auction_id.clone(),
                    unit: *unit,
                    round: *round,
                    requested_price: *requested_price,
                    price: *price,
                    meets_requirements: *meets_requirements,
                    load: *load,
                    attractiveness: *attractiveness,
                }),
                AgentEvent::SpotPrice {
                    load,
                    attractiveness,
                    price,
                } => metrics.spot.push(SpotSample {
                    at: *at,
                    resource_id: agent.clone(),
                    load: *load,
                    attractiveness: *attractiveness,
                    price: *price,
                }),
                _ => {}
            },
            TranscriptRecord::Message {
                at,
                agent,
                direction,
                message,
            } => {
                let Some((auction_id, unit)) = parse_conversation_id(&message.conversation_id) else {
                    continue;
                };
                if !auctions.get(auction_id).is_some_and(|b| b.record.as_ref().is_some_and(|r| &r.user == agent)) {
                    continue;
                }
                match direction {
                    Direction::Sent if message.performative == Performative::CallForProposals => {
                        cfps.insert(message.message_id.clone(), (auction_id.to_string(), *at));
                    }
                    Direction::Received => {
                        let Some((_, sent)) = message.in_reply_to.as_ref().and_then(|id| cfps.remove(id)) else {
                            continue;
                        };
                        let r = auctions
                            .get_mut(auction_id)
                            .and_then(|b| b.record.as_mut())
                            .expect("checked above");
                        r.response_ms.push(at.millis_since(sent));
                        if let Content::Offer { offer } = &message.content {
                            r.offers.push(ReceivedOffer {
                                unit,
                                round: offer.round,
                                resource_id: offer.resource_id.clone(),
                                price: offer.price,
                                meets_requirements: offer.meets_requirements,
                            });
                        }
                    }
                    _ => {}
                }
            }
            TranscriptRecord::Transition { .. } => {}
        }
    }
    for (_, b) in auctions {
        let Some(mut r) = b.record else { continue };
        r.round_mean_offer = (1..=r.rounds)
            .map(|round| {
                mean(
                    r.offers
                        .iter()
                        .filter(|o| o.round == round && o.meets_requirements)
                        .map(|o| o.price.as_f64()),
                )
            })
            .collect();
        r.round_durations_ms = b
            .round_open
            .iter()
            .filter_map(|(round, open)| b.round_last.get(round).map(|last| last.millis_since(*open).max(0)))
            .collect();
        if let Some(fin) = r.finished_at {
            r.total_ms = Some(fin.millis_since(r.started_at));
            r.finalize_ms = b.bidding_closed.map(|c| fin.millis_since(c));
        }
        metrics.auctions.push(r);
    }
    metrics
}

/// Ratios of conforming offers to the original request price of their unit.
pub fn offer_ratios(metrics: &Metrics) -> Vec<f64> {
    metrics
        .auctions
        .iter()
        .filter(|a| a.complete)
        .flat_map(|a| {
            a.offers
                .iter()
                .filter(|o| o.meets_requirements)
                .filter_map(|o| {
                    let req = a.request_prices.get(o.unit)?;
                    req.is_positive().then(|| o.price.as_f64() / req.as_f64())
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

pub fn median_offer_ratio(metrics: &Metrics) -> Option<f64> {
    median(&mut offer_ratios(metrics))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundsRow {
    pub rounds: u32,
    pub auctions: usize,
    pub mean_sale_price: Option<f64>,
    pub mean_duration_s: Option<f64>,
}

/// Mean sale price and duration per configured round count.
pub fn by_rounds(metrics: &Metrics) -> Vec<RoundsRow> {
    let mut groups: BTreeMap<u32, Vec<&AuctionRecord>> = BTreeMap::new();
    for a in metrics.auctions.iter().filter(|a| a.complete) {
        groups.entry(a.rounds).or_default().push(a);
    }
    groups
        .into_iter()
        .map(|(rounds, v)| RoundsRow {
            rounds,
            auctions: v.len(),
            mean_sale_price: mean(v.iter().filter_map(|a| a.sale_price())),
            mean_duration_s: mean(v.iter().filter_map(|a| a.total_ms).map(|ms| ms as f64 / 1000.0)),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitsRow {
    pub units: usize,
    pub auctions: usize,
    pub mean_round_duration_s: Option<f64>,
    pub mean_finalize_s: Option<f64>,
    pub mean_total_s: Option<f64>,
}

pub fn by_units(metrics: &Metrics) -> Vec<UnitsRow> {
    let mut groups: BTreeMap<usize, Vec<&AuctionRecord>> = BTreeMap::new();
    for a in metrics.auctions.iter().filter(|a| a.complete) {
        groups.entry(a.units).or_default().push(a);
    }
    groups
        .into_iter()
        .map(|(units, v)| UnitsRow {
            units,
            auctions: v.len(),
            mean_round_duration_s: mean(v.iter().filter_map(|a| a.mean_round_duration_ms()).map(|x| x / 1000.0)),
            mean_finalize_s: mean(v.iter().filter_map(|a| a.finalize_ms).map(|x| x as f64 / 1000.0)),
            mean_total_s: mean(v.iter().filter_map(|a| a.total_ms).map(|x| x as f64 / 1000.0)),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsersRow {
    pub concurrent_users: usize,
    pub auctions: usize,
    pub mean_response_ms: Option<f64>,
}

/// Mean resource response time grouped by how many users had an auction
/// running when each auction started.
pub fn by_concurrency(metrics: &Metrics) -> Vec<UsersRow> {
    let done: Vec<&AuctionRecord> = metrics.auctions.iter().filter(|a| a.complete).collect();
    let mut groups: BTreeMap<usize, Vec<&AuctionRecord>> = BTreeMap::new();
    for a in &done {
        let mut users: Vec<&AgentId> = done
            .iter()
            .filter(|b| b.started_at <= a.started_at && b.finished_at.is_some_and(|f| f > a.started_at))
            .map(|b| &b.user)
            .collect();
        users.sort();
        users.dedup();
        groups.entry(users.len()).or_default().push(a);
    }
    groups
        .into_iter()
        .map(|(n, v)| UsersRow {
            concurrent_users: n,
            auctions: v.len(),
            mean_response_ms: mean(v.iter().flat_map(|a| a.response_ms.iter().map(|x| *x as f64))),
        })
        .collect()
}

/// Wins per resource over successful auctions.
pub fn winner_shares(metrics: &Metrics) -> Vec<(AgentId, usize, f64)> {
    let mut wins: BTreeMap<AgentId, usize> = BTreeMap::new();
    for a in metrics.auctions.iter().filter(|a| a.succeeded()) {
        for w in a.winners.iter().flatten() {
            *wins.entry(w.clone()).or_default() += 1;
        }
    }
    let total: usize = wins.values().sum();
    wins.into_iter()
        .map(|(r, n)| (r, n, if total == 0 { 0.0 } else { n as f64 / total as f64 }))
        .collect()
}

fn opt(v: Option<f64>, places: usize) -> String {
    v.map(|x| format!("{x:.places$}")).unwrap_or_default()
}

fn write_rows(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()
}

/// Writes one CSV per figure into `dir`.
pub fn write_csvs(metrics: &Metrics, dir: &Path) -> io::Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut emit = |name: &str, header: &[&str], rows: Vec<Vec<String>>| -> io::Result<()> {
        write_rows(&dir.join(name), header, rows)?;
        written.push(name.to_string());
        Ok(())
    };

    let complete: Vec<&AuctionRecord> = metrics.auctions.iter().filter(|a| a.complete).collect();
    emit(
        "round_prices.csv",
        &["auction_id", "request_price", "round", "mean_offer", "winning_price"],
        complete
            .iter()
            .flat_map(|a| {
                a.round_mean_offer.iter().enumerate().map(move |(i, m)| {
                    vec![
                        a.auction_id.clone(),
                        a.request_prices.first().map(|p| p.to_string()).unwrap_or_default(),
                        (i + 1).to_string(),
                        opt(*m, 2),
                        opt(a.sale_price(), 2),
                    ]
                })
            })
            .collect(),
    )?;
    emit(
        "winners.csv",
        &["resource_id", "wins", "share"],
        winner_shares(metrics)
            .into_iter()
            .map(|(r, n, s)| vec![r.to_string(), n.to_string(), format!("{s:.4}")])
            .collect(),
    )?;
    emit(
        "attractiveness.csv",
        &["at_ms", "resource_id", "attractiveness", "load"],
        metrics
            .spot
            .iter()
            .map(|s| {
                vec![
                    s.at.as_millis().to_string(),
                    s.resource_id.to_string(),
                    s.attractiveness.to_string(),
                    format!("{:.6}", s.load),
                ]
            })
            .collect(),
    )?;
    emit(
        "spot_prices.csv",
        &["at_ms", "resource_id", "price", "load"],
        metrics
            .spot
            .iter()
            .map(|s| {
                vec![
                    s.at.as_millis().to_string(),
                    s.resource_id.to_string(),
                    s.price.to_string(),
                    format!("{:.6}", s.load),
                ]
            })
            .collect(),
    )?;
    emit(
        "rounds_vs_price.csv",
        &["rounds", "auctions", "mean_sale_price", "mean_duration_s"],
        by_rounds(metrics)
            .into_iter()
            .map(|r| {
                vec![
                    r.rounds.to_string(),
                    r.auctions.to_string(),
                    opt(r.mean_sale_price, 2),
                    opt(r.mean_duration_s, 2),
                ]
            })
            .collect(),
    )?;
    emit(
        "units_vs_duration.csv",
        &["units", "auctions", "mean_round_duration_s", "mean_finalize_s", "mean_total_s"],
        by_units(metrics)
            .into_iter()
            .map(|r| {
                vec![
                    r.units.to_string(),
                    r.auctions.to_string(),
                    opt(r.mean_round_duration_s, 3),
                    opt(r.mean_finalize_s, 3),
                    opt(r.mean_total_s, 3),
                ]
            })
            .collect(),
    )?;
    emit(
        "users_vs_response.csv",
        &["concurrent_users", "auctions", "mean_response_ms"],
        by_concurrency(metrics)
            .into_iter()
            .map(|r| vec![r.concurrent_users.to_string(), r.auctions.to_string(), opt(r.mean_response_ms, 2)])
            .collect(),
    )?;
    let ratio = median_offer_ratio(metrics);
    emit(
        "summary.csv",
        &["auctions", "complete", "succeeded", "median_offer_ratio"],
        vec![vec![
            metrics.auctions.len().to_string(),
            complete.len().to_string(),
            complete.iter().filter(|a| a.succeeded()).count().to_string(),
            opt(ratio, 4),
        ]],
    )?;
    Ok(written)
}

/// Writes records as JSON lines.
pub fn write_transcript(records: &[TranscriptRecord], path: &Path) -> io::Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(io::Error::other)?);
        out.push('\n');
    }
    fs::write(path, out)
}

/// Reads and merges every `*.jsonl` transcript in `dir`, ordered by time.
/// A truncated last line is skipped.
pub fn read_transcripts(dir: &Path) -> io::Result<Vec<TranscriptRecord>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    let mut all = Vec::new();
    for p in paths {
        let f = io::BufReader::new(fs::File::open(&p)?);
        for line in f.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<TranscriptRecord>(&line) {
                Ok(r) => all.push(r),
                Err(e) => tracing::warn!("{}: skipping unreadable record: {e}", p.display()),
            }
        }
    }
    all.sort_by_key(|r| r.at());
    Ok(all)
}
