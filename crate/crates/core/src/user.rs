//! The user agent: runs multi-round reverse auctions and commits every unit
//! of a request atomically.

use std::any::Any;
use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Agent, AgentEvent, Outbox, Timer, WinRecord};
use crate::money::Money;
use crate::protocol::{
    new_conversation_id, AcceptContent, AclMessage, AgentId, CancelContent, ConfirmContent, Content, EntryKind,
    MessageFactory, Offer, Performative, RegistryEntry, RfqContent, SignedContent, Statement,
};
use crate::rfql::{validate_rfq, RfqDocument, RfqRequest, Violation};
use crate::signing::{sign_unit, BalanceQuery, Credential, DealTerms, SignedDocument};
use crate::time::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApprovalMode {
    /// Commit to the best conforming offers without asking.
    Auto,
    /// Ask before committing any unit.
    ManualAll,
    /// Ask only when a unit has nothing but below-request best offers.
    ManualBestOfferOnly,
}

impl std::str::FromStr for ApprovalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auto" => Ok(ApprovalMode::Auto),
            "manual" | "manual-best-offer-only" => Ok(ApprovalMode::ManualBestOfferOnly),
            "manual-all" => Ok(ApprovalMode::ManualAll),
            other => Err(format!("unknown approval mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuctionConfig {
    pub rounds: u32,
    pub round_interval_ms: i64,
    #[serde(default = "default_approval")]
    pub approval: ApprovalMode,
    /// How long to wait for a vote before trying the next offer.
    #[serde(default = "default_accept_timeout")]
    pub accept_timeout_ms: i64,
    /// Interval between commit retries while a hold is still open.
    #[serde(default = "default_confirm_retry")]
    pub confirm_retry_ms: i64,
    /// How long an approval may stay pending.
    #[serde(default = "default_approval_timeout")]
    pub approval_timeout_ms: i64,
    /// How long offers stay valid after bidding closes.
    #[serde(default = "default_offer_validity")]
    pub offer_validity_ms: i64,
}

fn default_approval() -> ApprovalMode {
    ApprovalMode::Auto
}
fn default_accept_timeout() -> i64 {
    10_000
}
fn default_confirm_retry() -> i64 {
    5_000
}
fn default_approval_timeout() -> i64 {
    600_000
}
fn default_offer_validity() -> i64 {
    600_000
}

impl AuctionConfig {
    pub fn new(rounds: u32, round_interval_ms: i64) -> Self {
        AuctionConfig {
            rounds,
            round_interval_ms,
            approval: default_approval(),
            accept_timeout_ms: default_accept_timeout(),
            confirm_retry_ms: default_confirm_retry(),
            approval_timeout_ms: default_approval_timeout(),
            offer_validity_ms: default_offer_validity(),
        }
    }

    pub fn with_approval(mut self, approval: ApprovalMode) -> Self {
        self.approval = approval;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserParams {
    pub user_id: AgentId,
    pub bank: AgentId,
    #[serde(default)]
    pub registry: Option<AgentId>,
    /// Give up on discovery if the registry does not answer in this time.
    #[serde(default = "default_discovery_timeout")]
    pub discovery_timeout_ms: i64,
}

fn default_discovery_timeout() -> i64 {
    10_000
}

impl UserParams {
    pub fn new(user_id: impl Into<AgentId>, bank: impl Into<AgentId>) -> Self {
        UserParams {
            user_id: user_id.into(),
            bank: bank.into(),
            registry: None,
            discovery_timeout_ms: default_discovery_timeout(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum UserError {
    #[error("invalid request document: {0:?}")]
    InvalidDocument(Vec<Violation>),
    #[error("no resources")]
    NoResources,
    #[error("no registry configured")]
    NoRegistry,
    #[error("invalid auction configuration: {0}")]
    BadConfig(String),
    #[error("unknown auction {0}")]
    UnknownAuction(String),
    #[error("unknown unit {0}")]
    UnknownUnit(usize),
    #[error("auction closed")]
    AuctionClosed,
    #[error("auction does not take approvals in {0:?} mode")]
    ApprovalNotEnabled(ApprovalMode),
    #[error("unit {0} is not awaiting approval")]
    NotPending(usize),
    #[error("unknown reservation {0}")]
    UnknownReservation(String),
    #[error("reservation {0} cannot be cancelled in its current state")]
    NotCancellable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Discovering,
    Bidding,
    AwaitingApproval,
    PhaseOne,
    PhaseTwo,
    Done,
    Failed,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Discovering => "discovering",
            Phase::Bidding => "bidding",
            Phase::AwaitingApproval => "awaiting-approval",
            Phase::PhaseOne => "phase-one",
            Phase::PhaseTwo => "phase-two",
            Phase::Done => "done",
            Phase::Failed => "failed",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Done | Phase::Failed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decision {
    Accept,
    Reject,
}

impl std::str::FromStr for Decision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "accept" => Ok(Decision::Accept),
            "reject" => Ok(Decision::Reject),
            other => Err(format!("unknown decision {other:?}")),
        }
    }
}

/// Sort order for conforming offers: price, then completion time, then
/// arrival, then offer id.
pub fn compare_offers(a: &Offer, b: &Offer, wall_time_secs: i64) -> Ordering {
    a.price
        .cmp(&b.price)
        .then_with(|| {
            a.proposed_start
                .plus_secs(wall_time_secs)
                .cmp(&b.proposed_start.plus_secs(wall_time_secs))
        })
        .then_with(|| a.received_at.cmp(&b.received_at))
        .then_with(|| a.offer_id.cmp(&b.offer_id))
}

/// Ranks the offers that meet the request; best offers are left out.
pub fn rank_offers(offers: &[Offer], wall_time_secs: i64) -> Vec<Offer> {
    let mut ranked: Vec<Offer> = offers.iter().filter(|o| o.meets_requirements).cloned().collect();
    ranked.sort_by(|a, b| compare_offers(a, b, wall_time_secs));
    ranked
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub round: u32,
    pub request_price: Money,
    pub offers: Vec<Offer>,
    pub refusals: usize,
    pub best_price: Option<Money>,
    pub opened_at: Timestamp,
    pub last_reply_at: Option<Timestamp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub offer: Offer,
    pub reservation_id: String,
    pub hold_until: Option<Timestamp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum ApprovalState {
    NotNeeded,
    Pending { offer: Offer },
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitState {
    pub index: usize,
    pub conversation_id: String,
    pub original: RfqRequest,
    pub current: RfqRequest,
    /// The request sent in each round, index 0 = round 1.
    pub sent: Vec<RfqRequest>,
    /// Conforming offers still in contention.
    pub live: Vec<Offer>,
    /// Non-binding offers made below the requested price.
    pub best_offers: Vec<Offer>,
    pub rounds: Vec<RoundSummary>,
    /// Final ranking walked during the voting phase.
    pub ranked: Vec<Offer>,
    pub next_candidate: usize,
    pub pending_accept: Option<String>,
    pub agreed: Option<Agreement>,
    pub confirmed: bool,
    pub document: Option<SignedDocument>,
    pub approval: ApprovalState,
}

impl UnitState {
    fn wall_secs(&self) -> i64 {
        self.original.wall_time.unwrap_or(0) as i64
    }

    fn request_for_round(&self, round: u32) -> Option<&RfqRequest> {
        self.sent.get(round.checked_sub(1)? as usize)
    }

    fn qualifies(&self, offer: &Offer) -> bool {
        let Some(req) = self.request_for_round(offer.round) else {
            return false;
        };
        let price_ok = req.cpu_hour_cost.is_some_and(|p| offer.price <= p);
        let deadline_ok = self
            .original
            .deadline()
            .is_some_and(|d| offer.proposed_start.plus_secs(self.wall_secs()) <= d);
        offer.meets_requirements && offer.price.is_positive() && price_ok && deadline_ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuctionState {
    pub auction_id: String,
    pub document: RfqDocument,
    pub config: AuctionConfig,
    pub resources: Vec<AgentId>,
    pub phase: Phase,
    pub round: u32,
    pub units: Vec<UnitState>,
    pub started_at: Timestamp,
    pub bidding_closed_at: Option<Timestamp>,
    pub finished_at: Option<Timestamp>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PurchaseStatus {
    Confirmed,
    CancelRequested,
    Cancelled,
}

/// A confirmed reservation bought by this user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Purchase {
    pub reservation_id: String,
    pub resource_id: AgentId,
    pub auction_id: String,
    pub unit: usize,
    pub price: Money,
    pub proposed_start: Timestamp,
    pub status: PurchaseStatus,
    pub re_credited: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Pending {
    Discovery { auction: String },
    Cfp { auction: String, unit: usize, round: u32 },
    Accept { auction: String, unit: usize, offer_id: String },
    Confirm { auction: String, unit: usize },
    Cancel { reservation_id: String },
    Balance,
    Market,
}

pub struct UserAgent {
    params: UserParams,
    credential: Credential,
    msgs: MessageFactory,
    auctions: BTreeMap<String, AuctionState>,
    by_conversation: HashMap<String, (String, usize)>,
    pending: HashMap<String, Pending>,
    purchases: BTreeMap<String, Purchase>,
    statement: Option<Statement>,
    market: Option<MarketView>,
    next_auction: u64,
}

/// The registry's answer to the most recent [`UserAgent::refresh_market`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketView {
    pub received_at: Timestamp,
    pub entries: Vec<RegistryEntry>,
}

impl UserAgent {
    pub fn new(params: UserParams, credential: Credential) -> Self {
        let msgs = MessageFactory::new(params.user_id.clone());
        UserAgent {
            params,
            credential,
            msgs,
            auctions: BTreeMap::new(),
            by_conversation: HashMap::new(),
            pending: HashMap::new(),
            purchases: BTreeMap::new(),
            statement: None,
            market: None,
            next_auction: 0,
        }
    }

    pub fn params(&self) -> &UserParams {
        &self.params
    }

    pub fn auctions(&self) -> impl Iterator<Item = &AuctionState> {
        self.auctions.values()
    }

    pub fn auction(&self, id: &str) -> Option<&AuctionState> {
        self.auctions.get(id)
    }

    pub fn purchases(&self) -> impl Iterator<Item = &Purchase> {
        self.purchases.values()
    }

    pub fn statement(&self) -> Option<&Statement> {
        self.statement.as_ref()
    }

    pub fn market(&self) -> Option<&MarketView> {
        self.market.as_ref()
    }

    fn me(&self) -> AgentId {
        self.params.user_id.clone()
    }

    /// Starts an auction. With `resources` empty the registry is asked for
    /// the current market.
    pub fn start_auction(
        &mut self,
        now: Timestamp,
        document: RfqDocument,
        config: AuctionConfig,
        resources: Vec<AgentId>,
        out: &mut Outbox,
    ) -> Result<String, UserError> {
        let violations = validate_rfq(&document);
        if !violations.is_empty() {
            return Err(UserError::InvalidDocument(violations));
        }
        if config.rounds == 0 {
            return Err(UserError::BadConfig("rounds must be at least 1".into()));
        }
        if config.round_interval_ms <= 0 {
            return Err(UserError::BadConfig("round interval must be positive".into()));
        }
        if resources.is_empty() && self.params.registry.is_none() {
            return Err(UserError::NoResources);
        }
        self.next_auction += 1;
        let auction_id = format!("{}-a{}", self.params.user_id, self.next_auction);
        let units = document
            .requests
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let conversation_id = new_conversation_id(&auction_id, i);
                self.by_conversation.insert(conversation_id.clone(), (auction_id.clone(), i));
                UnitState {
                    index: i,
                    conversation_id,
                    original: r.clone(),
                    current: r.clone(),
                    sent: Vec::new(),
                    live: Vec::new(),
                    best_offers: Vec::new(),
                    rounds: Vec::new(),
                    ranked: Vec::new(),
                    next_candidate: 0,
                    pending_accept: None,
                    agreed: None,
                    confirmed: false,
                    document: None,
                    approval: ApprovalState::NotNeeded,
                }
            })
            .collect();
        let state = AuctionState {
            auction_id: auction_id.clone(),
            document,
            config,
            resources,
            phase: Phase::Discovering,
            round: 0,
            units,
            started_at: now,
            bidding_closed_at: None,
            finished_at: None,
            failure: None,
        };
        self.auctions.insert(auction_id.clone(), state);
        let agent = self.me();
        let a = &self.auctions[&auction_id];
        out.event(
            now,
            &agent,
            AgentEvent::AuctionStarted {
                auction_id: auction_id.clone(),
                units: a.units.len(),
                rounds: a.config.rounds,
                round_interval_ms: a.config.round_interval_ms,
                request_prices: a.units.iter().map(|u| u.original.cpu_hour_cost.unwrap_or(Money::ZERO)).collect(),
                resources: a.resources.len(),
            },
        );
        if a.resources.is_empty() {
            let registry = self.params.registry.clone().expect("checked above");
            let msg = self.msgs.build(
                Performative::Request,
                &registry,
                &format!("{auction_id}/discovery"),
                None,
                now,
                Content::ListResources,
            );
            self.pending.insert(
                msg.message_id.clone(),
                Pending::Discovery {
                    auction: auction_id.clone(),
                },
            );
            out.send(msg);
            out.timer(
                now.plus_millis(self.params.discovery_timeout_ms),
                Timer::RoundTick {
                    auction_id: auction_id.clone(),
                    round: 0,
                },
            );
        } else {
            self.open_round(now, &auction_id, out);
        }
        Ok(auction_id)
    }

    fn set_phase(&mut self, now: Timestamp, auction_id: &str, to: Phase, out: &mut Outbox) {
        let agent = self.me();
        if let Some(a) = self.auctions.get_mut(auction_id) {
            if a.phase != to {
                out.transition(now, &agent, auction_id, a.phase.name(), to.name());
                a.phase = to;
            }
        }
    }

    fn open_round(&mut self, now: Timestamp, auction_id: &str, out: &mut Outbox) {
        let from_phase = self.auctions[auction_id].phase;
        if from_phase == Phase::Discovering {
            self.set_phase(now, auction_id, Phase::Bidding, out);
        }
        let agent = self.me();
        let a = self.auctions.get_mut(auction_id).expect("auction exists");
        a.round += 1;
        let round = a.round;
        let remaining = (a.config.rounds - round + 1) as i64;
        let expires = now.plus_millis(remaining * a.config.round_interval_ms + a.config.offer_validity_ms);
        out.event(
            now,
            &agent,
            AgentEvent::RoundOpened {
                auction_id: auction_id.to_string(),
                round,
                request_prices: a.units.iter().map(|u| u.current.cpu_hour_cost.unwrap_or(Money::ZERO)).collect(),
            },
        );
        let resources = a.resources.clone();
        let mut sends = Vec::new();
        for unit in &mut a.units {
            unit.sent.push(unit.current.clone());
            unit.rounds.push(RoundSummary {
                round,
                request_price: unit.current.cpu_hour_cost.unwrap_or(Money::ZERO),
                offers: Vec::new(),
                refusals: 0,
                best_price: None,
                opened_at: now,
                last_reply_at: None,
            });
            for r in &resources {
                sends.push((
                    r.clone(),
                    unit.conversation_id.clone(),
                    unit.index,
                    RfqContent {
                        auction_id: auction_id.to_string(),
                        unit_index: unit.index,
                        round,
                        request: unit.current.clone(),
                        offer_expires_at: expires,
                    },
                ));
            }
        }
        let interval = a.config.round_interval_ms;
        for (to, conv, unit, content) in sends {
            let msg = self
                .msgs
                .build(Performative::CallForProposals, &to, &conv, None, now, Content::Rfq(content));
            self.pending.insert(
                msg.message_id.clone(),
                Pending::Cfp {
                    auction: auction_id.to_string(),
                    unit,
                    round,
                },
            );
            out.send(msg);
        }
        out.timer(
            now.plus_millis(interval),
            Timer::RoundTick {
                auction_id: auction_id.to_string(),
                round,
            },
        );
    }

    fn reject_offer(&mut self, now: Timestamp, conversation_id: &str, offer: &Offer, out: &mut Outbox) {
        let msg = self.msgs.build(
            Performative::RejectProposal,
            &offer.resource_id,
            conversation_id,
            None,
            now,
            Content::Accept(AcceptContent {
                offer_id: offer.offer_id.clone(),
            }),
        );
        out.send(msg);
    }

    /// Closes a bidding round: reject what does not qualify, revise the
    /// request to the best price so far and either re-broadcast or finalize.
    pub fn on_round_tick(&mut self, now: Timestamp, auction_id: &str, round: u32, out: &mut Outbox) {
        let agent = self.me();
        let Some(a) = self.auctions.get_mut(auction_id) else {
            return;
        };
        if a.phase != Phase::Bidding || a.round != round {
            return;
        }
        let last_round = round >= a.config.rounds;
        let mut rejects: Vec<(String, Offer)> = Vec::new();
        for unit in &mut a.units {
            let wall = unit.wall_secs();
            let live = std::mem::take(&mut unit.live);
            let (keep, drop): (Vec<Offer>, Vec<Offer>) = live.into_iter().partition(|o| unit.qualifies(o));
            for o in drop {
                rejects.push((unit.conversation_id.clone(), o));
            }
            let ranked = rank_offers(&keep, wall);
            let best = ranked.first().cloned();
            if last_round {
                unit.live = ranked;
            } else {
                for o in ranked.iter().skip(1) {
                    rejects.push((unit.conversation_id.clone(), o.clone()));
                }
                unit.live = best.iter().cloned().collect();
                if let (Some(b), Some(cur)) = (&best, unit.current.cpu_hour_cost) {
                    unit.current.cpu_hour_cost = Some(b.price.min(cur));
                }
            }
            let summary = unit.rounds.last_mut().expect("round opened");
            summary.best_price = best.as_ref().map(|b| b.price);
            out.event(
                now,
                &agent,
                AgentEvent::RoundClosed {
                    auction_id: auction_id.to_string(),
                    round,
                    unit: unit.index,
                    offers: summary.offers.len(),
                    best_price: summary.best_price,
                    last_reply_at: summary.last_reply_at,
                },
            );
        }
        for (conv, o) in rejects {
            self.reject_offer(now, &conv, &o, out);
        }
        if last_round {
            self.close_bidding(now, auction_id, out);
        } else {
            self.open_round(now, auction_id, out);
        }
    }

    fn close_bidding(&mut self, now: Timestamp, auction_id: &str, out: &mut Outbox) {
        let agent = self.me();
        out.event(
            now,
            &agent,
            AgentEvent::BiddingClosed {
                auction_id: auction_id.to_string(),
            },
        );
        let a = self.auctions.get_mut(auction_id).expect("auction exists");
        a.bidding_closed_at = Some(now);
        let mode = a.config.approval;
        let mut approvals = Vec::new();
        let mut hopeless = None;
        for unit in &mut a.units {
            unit.ranked = std::mem::take(&mut unit.live);
            unit.next_candidate = 0;
            let cheapest_best = unit
                .best_offers
                .iter()
                .min_by(|x, y| compare_offers(x, y, unit.original.wall_time.unwrap_or(0) as i64))
                .cloned();
            let pending = match (mode, unit.ranked.first(), cheapest_best) {
                (ApprovalMode::ManualAll, Some(top), _) => Some(top.clone()),
                (ApprovalMode::ManualAll | ApprovalMode::ManualBestOfferOnly, None, Some(best)) => Some(best),
                (_, Some(_), _) => None,
                (_, None, _) => {
                    hopeless.get_or_insert(unit.index);
                    None
                }
            };
            if let Some(offer) = pending {
                approvals.push((unit.index, offer.clone()));
                unit.approval = ApprovalState::Pending { offer };
            }
        }
        if let Some(unit) = hopeless {
            self.fail(now, auction_id, &format!("unit {unit} received no acceptable offer"), out);
            return;
        }
        if approvals.is_empty() {
            self.start_phase_one(now, auction_id, out);
            return;
        }
        let timeout = a.config.approval_timeout_ms;
        self.set_phase(now, auction_id, Phase::AwaitingApproval, out);
        for (unit, offer) in approvals {
            out.event(
                now,
                &agent,
                AgentEvent::ApprovalRequested {
                    auction_id: auction_id.to_string(),
                    unit,
                    offer_id: offer.offer_id.clone(),
                    price: offer.price,
                    meets_requirements: offer.meets_requirements,
                },
            );
        }
        out.timer(
            now.plus_millis(timeout),
            Timer::ApprovalTimeout {
                auction_id: auction_id.to_string(),
            },
        );
    }

    /// Resolves a pending approval.
    pub fn approve_best_offer(
        &mut self,
        now: Timestamp,
        auction_id: &str,
        unit: usize,
        decision: Decision,
        out: &mut Outbox,
    ) -> Result<(), UserError> {
        let a = self
            .auctions
            .get_mut(auction_id)
            .ok_or_else(|| UserError::UnknownAuction(auction_id.to_string()))?;
        if a.config.approval == ApprovalMode::Auto {
            return Err(UserError::ApprovalNotEnabled(a.config.approval));
        }
        if a.phase.is_terminal() {
            return Err(UserError::AuctionClosed);
        }
        if a.phase != Phase::AwaitingApproval {
            return Err(UserError::NotPending(unit));
        }
        let u = a.units.get_mut(unit).ok_or(UserError::UnknownUnit(unit))?;
        let ApprovalState::Pending { offer } = u.approval.clone() else {
            return Err(UserError::NotPending(unit));
        };
        match decision {
            Decision::Reject => {
                u.approval = ApprovalState::Rejected;
                self.fail(now, auction_id, &format!("unit {unit} rejected by the user"), out);
            }
            Decision::Accept => {
                u.approval = ApprovalState::Accepted;
                if !offer.meets_requirements {
                    u.ranked = vec![offer];
                }
                if a.units.iter().all(|u| !matches!(u.approval, ApprovalState::Pending { .. })) {
                    self.start_phase_one(now, auction_id, out);
                }
            }
        }
        Ok(())
    }

    fn start_phase_one(&mut self, now: Timestamp, auction_id: &str, out: &mut Outbox) {
        self.set_phase(now, auction_id, Phase::PhaseOne, out);
        let n = self.auctions[auction_id].units.len();
        for unit in 0..n {
            self.try_next_candidate(now, auction_id, unit, out);
            if self.auctions[auction_id].phase != Phase::PhaseOne {
                return;
            }
        }
    }

    fn try_next_candidate(&mut self, now: Timestamp, auction_id: &str, unit: usize, out: &mut Outbox) {
        let a = self.auctions.get_mut(auction_id).expect("auction exists");
        let timeout = a.config.accept_timeout_ms;
        let u = &mut a.units[unit];
        let Some(offer) = u.ranked.get(u.next_candidate).cloned() else {
            self.fail(now, auction_id, &format!("unit {unit} exhausted its offers"), out);
            return;
        };
        u.next_candidate += 1;
        let conv = u.conversation_id.clone();
        let msg = self.msgs.build(
            Performative::AcceptProposal,
            &offer.resource_id,
            &conv,
            None,
            now,
            Content::Accept(AcceptContent {
                offer_id: offer.offer_id.clone(),
            }),
        );
        self.auctions.get_mut(auction_id).expect("auction exists").units[unit].pending_accept = Some(msg.message_id.clone());
        self.pending.insert(
            msg.message_id.clone(),
            Pending::Accept {
                auction: auction_id.to_string(),
                unit,
                offer_id: offer.offer_id.clone(),
            },
        );
        out.send(msg);
        out.timer(
            now.plus_millis(timeout),
            Timer::AcceptTimeout {
                auction_id: auction_id.to_string(),
                unit,
                offer_id: offer.offer_id,
            },
        );
    }

    fn deal_terms(&self, a: &AuctionState, unit: &UnitState, agreement: &Agreement) -> DealTerms {
        let request = unit
            .request_for_round(agreement.offer.round)
            .cloned()
            .unwrap_or_else(|| unit.current.clone());
        DealTerms {
            auction_id: a.auction_id.clone(),
            unit_index: unit.index,
            user_id: self.params.user_id.0.clone(),
            resource_id: agreement.offer.resource_id.0.clone(),
            reservation_id: agreement.reservation_id.clone(),
            price: agreement.offer.price,
            proposed_start: agreement.offer.proposed_start,
            request,
        }
    }

    /// Signs the deal terms of one unit with this user's credential.
    pub fn sign_unit(&self, terms: &DealTerms) -> SignedDocument {
        sign_unit(terms, &self.credential)
    }

    fn start_phase_two(&mut self, now: Timestamp, auction_id: &str, out: &mut Outbox) {
        self.set_phase(now, auction_id, Phase::PhaseTwo, out);
        let n = self.auctions[auction_id].units.len();
        for unit in 0..n {
            self.send_confirm(now, auction_id, unit, out);
        }
    }

    fn send_confirm(&mut self, now: Timestamp, auction_id: &str, unit: usize, out: &mut Outbox) {
        let a = &self.auctions[auction_id];
        let u = &a.units[unit];
        let Some(agreement) = u.agreed.clone() else {
            return;
        };
        let terms = self.deal_terms(a, u, &agreement);
        let doc = self.sign_unit(&terms);
        let conv = u.conversation_id.clone();
        let retry = a.config.confirm_retry_ms;
        let msg = self.msgs.build(
            Performative::Confirm,
            &agreement.offer.resource_id,
            &conv,
            None,
            now,
            Content::Confirm(ConfirmContent {
                reservation_id: agreement.reservation_id.clone(),
                signed_document: doc,
            }),
        );
        self.pending.insert(
            msg.message_id.clone(),
            Pending::Confirm {
                auction: auction_id.to_string(),
                unit,
            },
        );
        out.send(msg);
        out.timer(
            now.plus_millis(retry),
            Timer::ConfirmRetry {
                auction_id: auction_id.to_string(),
                unit,
            },
        );
    }

    fn send_cancel(&mut self, now: Timestamp, resource: &AgentId, conversation_id: &str, reservation_id: &str, reason: &str, out: &mut Outbox) {
        let msg = self.msgs.build(
            Performative::Cancel,
            resource,
            conversation_id,
            None,
            now,
            Content::Cancel(CancelContent {
                reservation_id: Some(reservation_id.to_string()),
                reason: reason.to_string(),
            }),
        );
        self.pending.insert(
            msg.message_id.clone(),
            Pending::Cancel {
                reservation_id: reservation_id.to_string(),
            },
        );
        out.send(msg);
    }

    /// Ends the auction unsuccessfully, cancelling every slot obtained so far.
    fn fail(&mut self, now: Timestamp, auction_id: &str, reason: &str, out: &mut Outbox) {
        let Some(a) = self.auctions.get(auction_id) else {
            return;
        };
        if a.phase.is_terminal() {
            return;
        }
        let mut cancels = Vec::new();
        let mut rejects = Vec::new();
        for u in &a.units {
            if let Some(ag) = &u.agreed {
                cancels.push((ag.offer.resource_id.clone(), u.conversation_id.clone(), ag.reservation_id.clone()));
            }
            for o in u.live.iter().chain(u.ranked.iter().skip(u.next_candidate)) {
                rejects.push((u.conversation_id.clone(), o.clone()));
            }
        }
        for (resource, conv, rid) in cancels {
            self.send_cancel(now, &resource, &conv, &rid, reason, out);
            if let Some(p) = self.purchases.get_mut(&rid) {
                p.status = PurchaseStatus::CancelRequested;
            }
        }
        for (conv, o) in rejects {
            self.reject_offer(now, &conv, &o, out);
        }
        self.set_phase(now, auction_id, Phase::Failed, out);
        let agent = self.me();
        let a = self.auctions.get_mut(auction_id).expect("auction exists");
        a.failure = Some(reason.to_string());
        a.finished_at = Some(now);
        out.event(
            now,
            &agent,
            AgentEvent::AuctionFinished {
                auction_id: auction_id.to_string(),
                outcome: "failed".into(),
                winners: vec![None; a.units.len()],
            },
        );
    }

    fn succeed(&mut self, now: Timestamp, auction_id: &str, out: &mut Outbox) {
        let losers: Vec<(String, Offer)> = self.auctions[auction_id]
            .units
            .iter()
            .flat_map(|u| u.ranked.iter().skip(u.next_candidate).map(|o| (u.conversation_id.clone(), o.clone())))
            .collect();
        for (conv, o) in losers {
            self.reject_offer(now, &conv, &o, out);
        }
        self.set_phase(now, auction_id, Phase::Done, out);
        let agent = self.me();
        let a = self.auctions.get_mut(auction_id).expect("auction exists");
        a.finished_at = Some(now);
        let winners: Vec<Option<WinRecord>> = a
            .units
            .iter()
            .map(|u| {
                u.agreed.as_ref().map(|ag| WinRecord {
                    resource_id: ag.offer.resource_id.clone(),
                    price: ag.offer.price,
                    reservation_id: ag.reservation_id.clone(),
                    meets_requirements: ag.offer.meets_requirements,
                })
            })
            .collect();
        out.event(
            now,
            &agent,
            AgentEvent::AuctionFinished {
                auction_id: auction_id.to_string(),
                outcome: "all-confirmed".into(),
                winners,
            },
        );
    }

    /// Asks the bank for this user's statement; the reply lands in
    /// [`Self::statement`], which is cleared until it arrives.
    pub fn request_balance(&mut self, now: Timestamp, entries: usize, out: &mut Outbox) {
        self.statement = None;
        let query = BalanceQuery {
            principal: self.params.user_id.0.clone(),
            issued_at: now,
            entries,
        };
        let doc = SignedDocument::signed_by(query.to_bytes(), &self.credential);
        let bank = self.params.bank.clone();
        let msg = self.msgs.build(
            Performative::Request,
            &bank,
            &format!("{}/balance", self.params.user_id),
            None,
            now,
            Content::BalanceQuery(SignedContent { signed_document: doc }),
        );
        self.pending.insert(msg.message_id.clone(), Pending::Balance);
        out.send(msg);
    }

    /// Asks the registry for the live resource list; the reply lands in
    /// [`Self::market`], which is cleared until it arrives.
    pub fn refresh_market(&mut self, now: Timestamp, out: &mut Outbox) -> Result<(), UserError> {
        let registry = self.params.registry.clone().ok_or(UserError::NoRegistry)?;
        self.market = None;
        let msg = self.msgs.build(
            Performative::Request,
            &registry,
            &format!("{}/market", self.params.user_id),
            None,
            now,
            Content::ListResources,
        );
        self.pending.insert(msg.message_id.clone(), Pending::Market);
        out.send(msg);
        Ok(())
    }

    /// Asks the resource to release a confirmed reservation.
    pub fn cancel_purchase(&mut self, now: Timestamp, reservation_id: &str, out: &mut Outbox) -> Result<(), UserError> {
        let p = self
            .purchases
            .get(reservation_id)
            .ok_or_else(|| UserError::UnknownReservation(reservation_id.to_string()))?;
        if p.status != PurchaseStatus::Confirmed {
            return Err(UserError::NotCancellable(reservation_id.to_string()));
        }
        let resource = p.resource_id.clone();
        let conv = new_conversation_id(&p.auction_id, p.unit);
        self.send_cancel(now, &resource, &conv, reservation_id, "cancelled by user", out);
        self.purchases.get_mut(reservation_id).expect("present").status = PurchaseStatus::CancelRequested;
        Ok(())
    }

    fn on_offer(&mut self, now: Timestamp, msg: &AclMessage, pend: Option<Pending>, out: &mut Outbox) {
        let Content::Offer { offer } = &msg.content else {
            return;
        };
        let Some((auction_id, unit)) = self.by_conversation.get(&msg.conversation_id).cloned() else {
            return;
        };
        let mut offer = offer.clone();
        offer.received_at = Some(now);
        let a = self.auctions.get_mut(&auction_id).expect("indexed auctions exist");
        if a.phase != Phase::Bidding || offer.unit_index != unit || offer.resource_id != msg.sender {
            let conv = msg.conversation_id.clone();
            self.reject_offer(now, &conv, &offer, out);
            return;
        }
        let u = &mut a.units[unit];
        if let Some(Pending::Cfp { round, .. }) = pend {
            if let Some(summary) = u.rounds.get_mut(round as usize - 1) {
                summary.offers.push(offer.clone());
                summary.last_reply_at = Some(now);
            }
        }
        if offer.meets_requirements {
            let superseded: Vec<Offer> = u.live.iter().filter(|o| o.resource_id == offer.resource_id).cloned().collect();
            u.live.retain(|o| o.resource_id != offer.resource_id);
            u.live.push(offer);
            let conv = u.conversation_id.clone();
            for o in superseded {
                self.reject_offer(now, &conv, &o, out);
            }
        } else {
            u.best_offers.retain(|o| o.resource_id != offer.resource_id);
            u.best_offers.push(offer);
        }
    }

    fn on_reply(&mut self, now: Timestamp, msg: AclMessage, out: &mut Outbox) {
        let pend = msg.in_reply_to.as_ref().and_then(|id| self.pending.remove(id));
        match (&msg.performative, pend) {
            (Performative::Propose, pend) => self.on_offer(now, &msg, pend, out),
            (Performative::Refuse, Some(Pending::Cfp { auction, unit, round })) => {
                if let Some(s) = self
                    .auctions
                    .get_mut(&auction)
                    .and_then(|a| a.units.get_mut(unit))
                    .and_then(|u| u.rounds.get_mut(round as usize - 1))
                {
                    s.refusals += 1;
                    s.last_reply_at = Some(now);
                }
            }
            (Performative::Agree, Some(Pending::Accept { auction, unit, offer_id })) => {
                self.on_agree(now, &msg, &auction, unit, &offer_id, out)
            }
            (Performative::Refuse, Some(Pending::Accept { auction, unit, .. })) => {
                let Some(a) = self.auctions.get_mut(&auction) else {
                    return;
                };
                let current = a.units[unit].pending_accept.as_deref() == msg.in_reply_to.as_deref();
                if a.phase == Phase::PhaseOne && current {
                    a.units[unit].pending_accept = None;
                    self.try_next_candidate(now, &auction, unit, out);
                }
            }
            (Performative::Confirm, Some(Pending::Confirm { auction, unit })) => self.on_confirmed(now, &msg, &auction, unit, out),
            (Performative::Cancel | Performative::Refuse, Some(Pending::Confirm { auction, unit })) => {
                let Some(a) = self.auctions.get(&auction) else {
                    return;
                };
                if a.phase == Phase::PhaseTwo && !a.units[unit].confirmed {
                    self.fail(now, &auction, &format!("unit {unit} could not be committed"), out);
                }
            }
            (Performative::Agree, Some(Pending::Cancel { reservation_id })) => {
                if let Some(p) = self.purchases.get_mut(&reservation_id) {
                    p.status = PurchaseStatus::Cancelled;
                }
            }
            (Performative::Refuse, Some(Pending::Cancel { reservation_id })) => {
                if let Some(p) = self.purchases.get_mut(&reservation_id) {
                    p.status = PurchaseStatus::Confirmed;
                    if let Content::Refusal(r) = &msg.content {
                        p.note = Some(format!("cancellation refused: {:?}", r.reason));
                    }
                }
            }
            (Performative::Agree, Some(Pending::Balance)) => {
                if let Content::Balance { statement } = msg.content {
                    self.statement = Some(statement);
                }
            }
            (Performative::Agree, Some(Pending::Market)) => {
                if let Content::ResourceList { entries } = msg.content {
                    self.market = Some(MarketView {
                        received_at: now,
                        entries,
                    });
                }
            }
            (Performative::Agree, Some(Pending::Discovery { auction })) => {
                let Content::ResourceList { entries } = &msg.content else {
                    return;
                };
                let Some(a) = self.auctions.get_mut(&auction) else {
                    return;
                };
                if a.phase != Phase::Discovering {
                    return;
                }
                a.resources = entries.iter().filter(|e| e.alive).map(|e| e.resource_id.clone()).collect();
                if a.resources.is_empty() {
                    self.fail(now, &auction, "no resources", out);
                } else {
                    self.open_round(now, &auction, out);
                }
            }
            (Performative::Agree, None) => {
                if let Content::Receipt(r) = &msg.content {
                    if r.kind == EntryKind::ReCredit {
                        if let Some(p) = self.purchases.get_mut(&r.reservation_id) {
                            p.re_credited = true;
                        }
                    }
                }
            }
            _ => {}
        }
    }

    fn on_agree(&mut self, now: Timestamp, msg: &AclMessage, auction_id: &str, unit: usize, offer_id: &str, out: &mut Outbox) {
        let Content::Agree(agree) = &msg.content else {
            return;
        };
        let a = self.auctions.get_mut(auction_id).expect("pending entries reference live auctions");
        let u = &mut a.units[unit];
        let current = u.pending_accept.as_deref() == msg.in_reply_to.as_deref();
        if a.phase != Phase::PhaseOne || !current {
            let conv = u.conversation_id.clone();
            self.send_cancel(now, &msg.sender, &conv, &agree.reservation_id, "agreement arrived too late", out);
            return;
        }
        let offer = u
            .ranked
            .iter()
            .find(|o| o.offer_id == offer_id)
            .cloned()
            .expect("accepted offers come from the ranking");
        u.pending_accept = None;
        u.agreed = Some(Agreement {
            offer,
            reservation_id: agree.reservation_id.clone(),
            hold_until: agree.hold_until,
        });
        if a.units.iter().all(|u| u.agreed.is_some()) {
            self.start_phase_two(now, auction_id, out);
        }
    }

    fn on_confirmed(&mut self, now: Timestamp, msg: &AclMessage, auction_id: &str, unit: usize, out: &mut Outbox) {
        let Content::Confirm(c) = &msg.content else {
            return;
        };
        let Some(a) = self.auctions.get_mut(auction_id) else {
            return;
        };
        let u = &mut a.units[unit];
        let Some(ag) = u.agreed.clone() else {
            return;
        };
        if ag.reservation_id != c.reservation_id || u.confirmed {
            return;
        }
        u.confirmed = true;
        u.document = Some(c.signed_document.clone());
        let status = if a.phase == Phase::PhaseTwo {
            PurchaseStatus::Confirmed
        } else {
            PurchaseStatus::CancelRequested
        };
        let purchase = Purchase {
            reservation_id: ag.reservation_id.clone(),
            resource_id: ag.offer.resource_id.clone(),
            auction_id: auction_id.to_string(),
            unit,
            price: ag.offer.price,
            proposed_start: ag.offer.proposed_start,
            status,
            re_credited: false,
            note: None,
        };
        self.purchases.insert(ag.reservation_id.clone(), purchase);
        if a.phase == Phase::PhaseTwo {
            if a.units.iter().all(|u| u.confirmed) {
                self.succeed(now, auction_id, out);
            }
        } else if a.phase == Phase::Failed {
            // The commit landed after the auction was abandoned; release it.
            let conv = a.units[unit].conversation_id.clone();
            self.send_cancel(now, &ag.offer.resource_id, &conv, &ag.reservation_id, "auction failed", out);
        }
    }

    fn on_accept_timeout(&mut self, now: Timestamp, auction_id: &str, unit: usize, offer_id: &str, out: &mut Outbox) {
        let Some(a) = self.auctions.get_mut(auction_id) else {
            return;
        };
        if a.phase != Phase::PhaseOne {
            return;
        }
        let u = &mut a.units[unit];
        let Some(pending_msg) = u.pending_accept.clone() else {
            return;
        };
        let same = matches!(self.pending.get(&pending_msg), Some(Pending::Accept { offer_id: o, .. }) if o == offer_id);
        if !same {
            return;
        }
        // Keep the pending entry so a late Agree can still be released.
        u.pending_accept = None;
        self.try_next_candidate(now, auction_id, unit, out);
    }

    fn on_confirm_retry(&mut self, now: Timestamp, auction_id: &str, unit: usize, out: &mut Outbox) {
        let Some(a) = self.auctions.get(auction_id) else {
            return;
        };
        if a.phase != Phase::PhaseTwo || a.units[unit].confirmed {
            return;
        }
        let hold_until = a.units[unit].agreed.as_ref().and_then(|ag| ag.hold_until);
        if hold_until.is_some_and(|h| now > h) {
            self.fail(now, auction_id, &format!("unit {unit} hold expired before commit"), out);
            return;
        }
        self.send_confirm(now, auction_id, unit, out);
    }
}

impl Agent for UserAgent {
    fn id(&self) -> &AgentId {
        &self.params.user_id
    }

    fn handle_message(&mut self, now: Timestamp, msg: AclMessage, out: &mut Outbox) {
        self.on_reply(now, msg, out);
    }

    fn handle_timer(&mut self, now: Timestamp, timer: Timer, out: &mut Outbox) {
        match timer {
            Timer::RoundTick { auction_id, round: 0 } => {
                if self.auctions.get(&auction_id).is_some_and(|a| a.phase == Phase::Discovering) {
                    self.fail(now, &auction_id, "registry did not answer", out);
                }
            }
            Timer::RoundTick { auction_id, round } => self.on_round_tick(now, &auction_id, round, out),
            Timer::AcceptTimeout { auction_id, unit, offer_id } => self.on_accept_timeout(now, &auction_id, unit, &offer_id, out),
            Timer::ConfirmRetry { auction_id, unit } => self.on_confirm_retry(now, &auction_id, unit, out),
            Timer::ApprovalTimeout { auction_id } => {
                if self.auctions.get(&auction_id).is_some_and(|a| a.phase == Phase::AwaitingApproval) {
                    self.fail(now, &auction_id, "approval timed out", out);
                }
            }
            _ => {}
        }
    }

    fn as_any(&self) -> &dyn Any {
        self
    }

    fn as_any_mut(&mut self) -> &mut dyn Any {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn offer(id: &str, price: i64, start: i64, arrival: i64) -> Offer {
        Offer {
            offer_id: id.into(),
            resource_id: AgentId::new(format!("r-{id}")),
            unit_index: 0,
            price: Money::from_units(price),
            proposed_start: Timestamp::from_secs(start),
            meets_requirements: true,
            round: 1,
            received_at: Some(Timestamp::from_secs(arrival)),
        }
    }

    fn ids(v: &[Offer]) -> Vec<&str> {
        v.iter().map(|o| o.offer_id.as_str()).collect()
    }

    #[test]
    fn price_dominates() {
        let ranked = rank_offers(&[offer("a", 50, 0, 2), offer("b", 45, 0, 3)], 3600);
        assert_eq!(ids(&ranked), ["b", "a"]);
    }

    #[test]
    fn earlier_completion_breaks_price_ties() {
        let ranked = rank_offers(&[offer("late", 40, 14 * 3600, 1), offer("early", 40, 12 * 3600, 2)], 3600);
        assert_eq!(ids(&ranked), ["early", "late"]);
    }

    #[test]
    fn arrival_breaks_remaining_ties() {
        let ranked = rank_offers(&[offer("second", 40, 0, 9), offer("first", 40, 0, 5)], 3600);
        assert_eq!(ids(&ranked), ["first", "second"]);
    }

    #[test]
    fn best_offers_are_not_ranked() {
        let mut b = offer("b", 10, 0, 1);
        b.meets_requirements = false;
        assert_eq!(ids(&rank_offers(&[b, offer("a", 50, 0, 2)], 3600)), ["a"]);
    }

    #[test]
    fn approval_modes_parse() {
        assert_eq!("auto".parse::<ApprovalMode>(), Ok(ApprovalMode::Auto));
        assert_eq!("manual".parse::<ApprovalMode>(), Ok(ApprovalMode::ManualBestOfferOnly));
        assert_eq!("manual-all".parse::<ApprovalMode>(), Ok(ApprovalMode::ManualAll));
        assert!("sometimes".parse::<ApprovalMode>().is_err());
    }
}
