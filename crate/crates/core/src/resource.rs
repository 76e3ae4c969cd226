//! The resource agent: sells time on one machine partition.

use std::any::Any;
use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::agent::{Agent, AgentEvent, Outbox, Timer};
use crate::money::Money;
use crate::pricing::{attractiveness, make_offer, LoadSnapshot, OfferDecision, PricingConfig};
use crate::protocol::{
    AclMessage, AgentId, AgreeContent, CancelContent, ConfirmContent, Content, EntryKind, MessageFactory, Offer,
    Performative, RefusalReason, RfqContent, SignedContent,
};
use crate::queuesim::{QueueError, QueueSystem};
use crate::rfql::{match_static, ResourceProfile, RfqRequest};
use crate::signing::{CancellationNotice, Credential, DealTerms, KeyRing, SignedDocument};
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceParams {
    pub resource_id: AgentId,
    pub profile: ResourceProfile,
    pub pricing: PricingConfig,
    #[serde(default = "default_hold_ms")]
    pub hold_timeout_ms: i64,
    #[serde(default = "default_sweep_ms")]
    pub sweep_interval_ms: i64,
    pub bank: AgentId,
    #[serde(default)]
    pub registry: Option<AgentId>,
    /// Address advertised to the registry.
    #[serde(default)]
    pub address: String,
    #[serde(default = "default_heartbeat_ms")]
    pub heartbeat_interval_ms: i64,
    #[serde(default = "default_bank_attempts")]
    pub bank_max_attempts: u32,
    #[serde(default = "default_bank_backoff_ms")]
    pub bank_backoff_ms: i64,
}

fn default_hold_ms() -> i64 {
    60_000
}
fn default_sweep_ms() -> i64 {
    5_000
}
fn default_heartbeat_ms() -> i64 {
    5_000
}
fn default_bank_attempts() -> u32 {
    5
}
fn default_bank_backoff_ms() -> i64 {
    1_000
}

impl ResourceParams {
    pub fn new(resource_id: impl Into<AgentId>, profile: ResourceProfile, pricing: PricingConfig, bank: impl Into<AgentId>) -> Self {
        ResourceParams {
            resource_id: resource_id.into(),
            profile,
            pricing,
            hold_timeout_ms: default_hold_ms(),
            sweep_interval_ms: default_sweep_ms(),
            bank: bank.into(),
            registry: None,
            address: String::new(),
            heartbeat_interval_ms: default_heartbeat_ms(),
            bank_max_attempts: default_bank_attempts(),
            bank_backoff_ms: default_bank_backoff_ms(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DealState {
    Agreed,
    Confirmed,
    Cancelled,
    Expired,
}

impl DealState {
    fn name(self) -> &'static str {
        match self {
            DealState::Agreed => "agreed",
            DealState::Confirmed => "confirmed",
            DealState::Cancelled => "cancelled",
            DealState::Expired => "expired",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum BankState {
    NotSent,
    Pending { attempt: u32 },
    Settled { tx_id: String },
    Reversed { tx_id: String },
    Flagged { detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LiveOffer {
    offer: Offer,
    request: RfqRequest,
    user: AgentId,
    conversation_id: String,
    auction_id: String,
    expires_at: Timestamp,
}

/// A reservation from the moment this agent agreed to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingDeal {
    pub offer: Offer,
    pub request: RfqRequest,
    pub user: AgentId,
    pub auction_id: String,
    pub conversation_id: String,
    pub reservation_id: String,
    pub hold_until: Timestamp,
    pub state: DealState,
    pub bank: BankState,
    /// Doubly-signed terms once committed.
    pub document: Option<SignedDocument>,
    /// Set when a cancellation arrives before settlement is acknowledged.
    pub cancel_pending: bool,
}

/// Most recent attractiveness sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpotSample {
    pub at: Timestamp,
    pub load: f64,
    pub attractiveness: Money,
    pub price: Money,
}

pub struct ResourceAgent {
    params: ResourceParams,
    queue: Box<dyn QueueSystem>,
    credential: Credential,
    keys: KeyRing,
    msgs: MessageFactory,
    offers: HashMap<String, LiveOffer>,
    deals: BTreeMap<String, PendingDeal>,
    bank_requests: HashMap<String, String>,
    next_offer: u64,
    last_sample: Option<SpotSample>,
}

impl ResourceAgent {
    pub fn new(params: ResourceParams, queue: Box<dyn QueueSystem>, credential: Credential, keys: KeyRing) -> Self {
        let msgs = MessageFactory::new(params.resource_id.clone());
        ResourceAgent {
            params,
            queue,
            credential,
            keys,
            msgs,
            offers: HashMap::new(),
            deals: BTreeMap::new(),
            bank_requests: HashMap::new(),
            next_offer: 0,
            last_sample: None,
        }
    }

    pub fn params(&self) -> &ResourceParams {
        &self.params
    }

    pub fn queue(&self) -> &dyn QueueSystem {
        self.queue.as_ref()
    }

    pub fn queue_mut(&mut self) -> &mut dyn QueueSystem {
        self.queue.as_mut()
    }

    pub fn keys_mut(&mut self) -> &mut KeyRing {
        &mut self.keys
    }

    pub fn deals(&self) -> impl Iterator<Item = &PendingDeal> {
        self.deals.values()
    }

    pub fn deal(&self, reservation_id: &str) -> Option<&PendingDeal> {
        self.deals.get(reservation_id)
    }

    pub fn live_offers(&self) -> usize {
        self.offers.len()
    }

    pub fn last_sample(&self) -> Option<SpotSample> {
        self.last_sample
    }

    fn me(&self) -> AgentId {
        self.params.resource_id.clone()
    }

    fn set_deal_state(&mut self, now: Timestamp, reservation_id: &str, to: DealState, out: &mut Outbox) {
        let agent = self.me();
        if let Some(deal) = self.deals.get_mut(reservation_id) {
            out.transition(now, &agent, reservation_id, deal.state.name(), to.name());
            deal.state = to;
        }
    }

    /// Samples the price this resource would quote right now for one core-hour.
    pub fn sample_spot(&mut self, now: Timestamp) -> Option<SpotSample> {
        let snap = self.queue.availability(now, 1, 3600).ok()?;
        let load = snap.load();
        let attract = Money::from_exact(attractiveness(&self.params.pricing, load));
        let price = make_offer(&self.params.pricing, load, self.params.pricing.start_price)
            .price()
            .unwrap_or(self.params.pricing.start_price);
        let sample = SpotSample {
            at: now,
            load: load.fraction(),
            attractiveness: attract,
            price,
        };
        self.last_sample = Some(sample);
        Some(sample)
    }

    /// Evaluates a call for proposals: static match, earliest feasible start, price.
    pub fn handle_cfp(&mut self, now: Timestamp, msg: &AclMessage, out: &mut Outbox) {
        let Content::Rfq(rfq) = &msg.content else {
            let reply = self.msgs.refuse(msg, now, RefusalReason::MalformedContent, "expected rfq content");
            out.send(reply);
            return;
        };
        let (decision, start, load) = match self.evaluate(now, rfq) {
            Ok(v) => v,
            Err((reason, detail)) => {
                self.decline(now, msg, rfq, reason, &detail, out);
                return;
            }
        };
        let requested = rfq.request.cpu_hour_cost.unwrap_or(Money::ZERO);
        let (price, meets) = match decision {
            OfferDecision::Bid(p) => (p, true),
            OfferDecision::BestOffer(p) => (p, false),
            OfferDecision::Decline => {
                self.decline(now, msg, rfq, RefusalReason::BelowFloor, "request is below the price floor", out);
                return;
            }
        };
        self.next_offer += 1;
        let offer = Offer {
            offer_id: format!("{}-o{}", self.params.resource_id, self.next_offer),
            resource_id: self.me(),
            unit_index: rfq.unit_index,
            price,
            proposed_start: start,
            meets_requirements: meets,
            round: rfq.round,
            received_at: None,
        };
        let attract = Money::from_exact(attractiveness(&self.params.pricing, load));
        out.event(
            now,
            &self.params.resource_id,
            AgentEvent::OfferMade {
                auction_id: rfq.auction_id.clone(),
                unit: rfq.unit_index,
                round: rfq.round,
                user: msg.sender.clone(),
                requested_price: requested,
                price,
                meets_requirements: meets,
                load: load.fraction(),
                attractiveness: attract,
            },
        );
        self.offers.insert(
            offer.offer_id.clone(),
            LiveOffer {
                offer: offer.clone(),
                request: rfq.request.clone(),
                user: msg.sender.clone(),
                conversation_id: msg.conversation_id.clone(),
                auction_id: rfq.auction_id.clone(),
                expires_at: rfq.offer_expires_at,
            },
        );
        let reply = self.msgs.reply(msg, Performative::Propose, now, Content::Offer { offer });
        out.send(reply);
    }

    fn decline(&mut self, now: Timestamp, msg: &AclMessage, rfq: &RfqContent, reason: RefusalReason, detail: &str, out: &mut Outbox) {
        out.event(
            now,
            &self.params.resource_id,
            AgentEvent::Declined {
                auction_id: rfq.auction_id.clone(),
                unit: rfq.unit_index,
                round: rfq.round,
                reason: format!("{reason:?}"),
            },
        );
        let reply = self.msgs.refuse(msg, now, reason, detail);
        out.send(reply);
    }

    fn evaluate(&self, now: Timestamp, rfq: &RfqContent) -> Result<(OfferDecision, Timestamp, LoadSnapshot), (RefusalReason, String)> {
        let req = &rfq.request;
        if let Some(v) = req.violations().first() {
            return Err((RefusalReason::MalformedContent, format!("{}: {}", v.term, v.kind)));
        }
        if !match_static(&self.params.profile, req) {
            return Err((RefusalReason::StaticMismatch, "static terms not satisfied".into()));
        }
        let cores = req.cores().expect("validated");
        let wall = req.wall_time.expect("validated") as i64;
        let deadline = req.deadline().expect("validated");
        let earliest = req.earliest_start().map_or(now, |s| s.max(now));
        let latest = deadline.plus_secs(-wall);
        let found = self
            .queue
            .earliest_feasible(earliest, latest, cores, wall)
            .map_err(|e| (RefusalReason::NoCapacity, e.to_string()))?;
        let Some((start, snap)) = found else {
            return Err((RefusalReason::NoCapacity, "no feasible start before the deadline".into()));
        };
        let requested = req.cpu_hour_cost.expect("validated");
        let load = snap.load();
        Ok((make_offer(&self.params.pricing, load, requested), start, load))
    }

    /// Voting phase: re-check the offer and hold a tentative slot.
    pub fn handle_accept(&mut self, now: Timestamp, msg: &AclMessage, out: &mut Outbox) {
        let Content::Accept(accept) = &msg.content else {
            let reply = self.msgs.refuse(msg, now, RefusalReason::MalformedContent, "expected accept content");
            out.send(reply);
            return;
        };
        let live = match self.offers.get(&accept.offer_id) {
            Some(live) if live.user == msg.sender => self.offers.remove(&accept.offer_id).expect("present"),
            _ => {
                let reply = self.msgs.refuse(msg, now, RefusalReason::UnknownOffer, accept.offer_id.clone());
                out.send(reply);
                return;
            }
        };
        if now > live.expires_at {
            let reply = self.msgs.refuse(msg, now, RefusalReason::OfferExpired, accept.offer_id.clone());
            out.send(reply);
            return;
        }
        let cores = live.request.cores().unwrap_or(0);
        let wall = live.request.wall_time.unwrap_or(0) as i64;
        let hold_until = now.plus_millis(self.params.hold_timeout_ms);
        let placed = self
            .queue
            .reserve(live.offer.proposed_start, cores, wall)
            .and_then(|id| self.queue.hold(&id, hold_until).map(|_| id));
        let reservation_id = match placed {
            Ok(id) => id,
            Err(e) => {
                let reply = self.msgs.refuse(msg, now, RefusalReason::NoLongerFeasible, e.to_string());
                out.send(reply);
                return;
            }
        };
        let agent = self.me();
        out.transition(now, &agent, &reservation_id, "offered", "agreed");
        out.event(
            now,
            &agent,
            AgentEvent::HoldPlaced {
                reservation_id: reservation_id.clone(),
                hold_until,
            },
        );
        self.deals.insert(
            reservation_id.clone(),
            PendingDeal {
                offer: live.offer,
                request: live.request,
                user: live.user,
                auction_id: live.auction_id,
                conversation_id: live.conversation_id,
                reservation_id: reservation_id.clone(),
                hold_until,
                state: DealState::Agreed,
                bank: BankState::NotSent,
                document: None,
                cancel_pending: false,
            },
        );
        out.timer(
            hold_until.plus_millis(1),
            Timer::HoldExpiry {
                reservation_id: reservation_id.clone(),
            },
        );
        let reply = self.msgs.reply(
            msg,
            Performative::Agree,
            now,
            Content::Agree(AgreeContent {
                reservation_id,
                hold_until: Some(hold_until),
            }),
        );
        out.send(reply);
    }

    fn handle_reject(&mut self, msg: &AclMessage) {
        if let Content::Accept(a) = &msg.content {
            if self.offers.get(&a.offer_id).is_some_and(|o| o.user == msg.sender) {
                self.offers.remove(&a.offer_id);
            }
        }
    }

    fn cancel_reply(&mut self, now: Timestamp, msg: &AclMessage, reservation_id: &str, reason: &str) -> AclMessage {
        self.msgs.reply(
            msg,
            Performative::Cancel,
            now,
            Content::Cancel(CancelContent {
                reservation_id: Some(reservation_id.to_string()),
                reason: reason.to_string(),
            }),
        )
    }

    /// Commit phase: verify the user's signature and lock the reservation in.
    pub fn handle_confirm(&mut self, now: Timestamp, msg: &AclMessage, out: &mut Outbox) {
        let Content::Confirm(confirm) = &msg.content else {
            let reply = self.msgs.refuse(msg, now, RefusalReason::MalformedContent, "expected confirm content");
            out.send(reply);
            return;
        };
        let rid = confirm.reservation_id.clone();
        let Some(deal) = self.deals.get(&rid).cloned() else {
            let reply = self.cancel_reply(now, msg, &rid, "unknown reservation");
            out.send(reply);
            return;
        };
        if deal.user != msg.sender {
            let reply = self.msgs.refuse(msg, now, RefusalReason::NotOwner, rid);
            out.send(reply);
            return;
        }
        match deal.state {
            DealState::Confirmed => {
                let reply = self.msgs.reply(
                    msg,
                    Performative::Confirm,
                    now,
                    Content::Confirm(ConfirmContent {
                        reservation_id: rid,
                        signed_document: deal.document.clone().expect("confirmed deals keep their document"),
                    }),
                );
                out.send(reply);
                return;
            }
            DealState::Cancelled | DealState::Expired => {
                let reply = self.cancel_reply(now, msg, &rid, "reservation released");
                out.send(reply);
                return;
            }
            DealState::Agreed if now > deal.hold_until => {
                self.expire_one(now, &rid, out);
                let reply = self.cancel_reply(now, msg, &rid, "hold expired");
                out.send(reply);
                return;
            }
            DealState::Agreed => {}
        }
        let doc = &confirm.signed_document;
        if let Err(e) = self.keys.verify_chain(doc, &[deal.user.as_str()]) {
            let reply = self.msgs.refuse(msg, now, RefusalReason::BadSignature, e.to_string());
            out.send(reply);
            return;
        }
        let expected = self.deal_terms(&deal);
        match doc.decode::<DealTerms>("deal terms") {
            Ok(terms) if terms == expected => {}
            _ => {
                let reply = self.msgs.refuse(msg, now, RefusalReason::TermsMismatch, rid);
                out.send(reply);
                return;
            }
        }
        if let Err(e) = self.queue.confirm(&rid) {
            let reply = self.cancel_reply(now, msg, &rid, &e.to_string());
            out.send(reply);
            return;
        }
        let mut doubly = doc.clone();
        self.credential.countersign(&mut doubly);
        self.set_deal_state(now, &rid, DealState::Confirmed, out);
        let agent = self.me();
        out.event(now, &agent, AgentEvent::ReservationConfirmed { reservation_id: rid.clone() });
        if let Some(d) = self.deals.get_mut(&rid) {
            d.document = Some(doubly.clone());
        }
        let reply = self.msgs.reply(
            msg,
            Performative::Confirm,
            now,
            Content::Confirm(ConfirmContent {
                reservation_id: rid.clone(),
                signed_document: doubly,
            }),
        );
        out.send(reply);
        self.notify_bank(now, &rid, 1, out);
    }

    pub fn deal_terms(&self, deal: &PendingDeal) -> DealTerms {
        DealTerms {
            auction_id: deal.auction_id.clone(),
            unit_index: deal.offer.unit_index,
            user_id: deal.user.0.clone(),
            resource_id: self.params.resource_id.0.clone(),
            reservation_id: deal.reservation_id.clone(),
            price: deal.offer.price,
            proposed_start: deal.offer.proposed_start,
            request: deal.request.clone(),
        }
    }

    /// Forwards the doubly-signed document to the bank.
    pub fn notify_bank(&mut self, now: Timestamp, reservation_id: &str, attempt: u32, out: &mut Outbox) {
        let Some(deal) = self.deals.get_mut(reservation_id) else {
            return;
        };
        let Some(doc) = deal.document.clone() else {
            return;
        };
        deal.bank = BankState::Pending { attempt };
        let bank = self.params.bank.clone();
        let msg = self.msgs.build(
            Performative::Request,
            &bank,
            &format!("settle/{reservation_id}"),
            None,
            now,
            Content::BankUpdate(SignedContent { signed_document: doc }),
        );
        self.bank_requests.insert(msg.message_id.clone(), reservation_id.to_string());
        out.send(msg);
        let backoff = self.params.bank_backoff_ms << (attempt - 1).min(10);
        out.timer(
            now.plus_millis(backoff),
            Timer::BankRetry {
                reservation_id: reservation_id.to_string(),
                attempt,
            },
        );
    }

    fn on_bank_retry(&mut self, now: Timestamp, reservation_id: &str, attempt: u32, out: &mut Outbox) {
        let Some(deal) = self.deals.get_mut(reservation_id) else {
            return;
        };
        if deal.bank != (BankState::Pending { attempt }) {
            return;
        }
        if attempt >= self.params.bank_max_attempts {
            let detail = format!("bank unreachable after {attempt} attempts");
            deal.bank = BankState::Flagged { detail: detail.clone() };
            let agent = self.me();
            out.event(
                now,
                &agent,
                AgentEvent::BankFlagged {
                    reservation_id: reservation_id.to_string(),
                    detail,
                },
            );
            return;
        }
        self.notify_bank(now, reservation_id, attempt + 1, out);
    }

    fn send_bank_cancel(&mut self, now: Timestamp, reservation_id: &str, out: &mut Outbox) {
        let Some(deal) = self.deals.get(reservation_id) else {
            return;
        };
        let notice = CancellationNotice {
            reservation_id: reservation_id.to_string(),
            user_id: deal.user.0.clone(),
            resource_id: self.params.resource_id.0.clone(),
            issued_at: now,
        };
        let doc = SignedDocument::signed_by(notice.to_bytes(), &self.credential);
        let conversation = deal.conversation_id.clone();
        let bank = self.params.bank.clone();
        let msg = self.msgs.build(
            Performative::Request,
            &bank,
            &conversation,
            None,
            now,
            Content::BankCancel(SignedContent { signed_document: doc }),
        );
        self.bank_requests.insert(msg.message_id.clone(), reservation_id.to_string());
        out.send(msg);
    }

    fn handle_bank_reply(&mut self, now: Timestamp, msg: &AclMessage, out: &mut Outbox) {
        let agent = self.me();
        match &msg.content {
            Content::Receipt(receipt) => {
                let rid = receipt.reservation_id.clone();
                let Some(deal) = self.deals.get_mut(&rid) else {
                    return;
                };
                match receipt.kind {
                    EntryKind::Settlement => {
                        if !matches!(deal.bank, BankState::Pending { .. } | BankState::NotSent) {
                            return;
                        }
                        deal.bank = BankState::Settled {
                            tx_id: receipt.tx_id.clone(),
                        };
                        let pending = std::mem::take(&mut deal.cancel_pending);
                        out.event(
                            now,
                            &agent,
                            AgentEvent::Settled {
                                reservation_id: rid.clone(),
                                tx_id: receipt.tx_id.clone(),
                            },
                        );
                        if pending {
                            self.send_bank_cancel(now, &rid, out);
                        }
                    }
                    EntryKind::ReCredit => {
                        deal.bank = BankState::Reversed {
                            tx_id: receipt.tx_id.clone(),
                        };
                    }
                    EntryKind::Deposit => {}
                }
            }
            Content::Refusal(refusal) => {
                let Some(rid) = msg.in_reply_to.as_ref().and_then(|m| self.bank_requests.get(m)).cloned() else {
                    return;
                };
                if let Some(deal) = self.deals.get_mut(&rid) {
                    if matches!(deal.bank, BankState::Pending { .. }) {
                        let detail = format!("bank refused: {:?} {}", refusal.reason, refusal.detail);
                        deal.bank = BankState::Flagged { detail: detail.clone() };
                        out.event(now, &agent, AgentEvent::BankFlagged { reservation_id: rid, detail });
                    }
                }
            }
            _ => {}
        }
    }

    /// Releases a reservation at the user's request.
    pub fn handle_cancel(&mut self, now: Timestamp, msg: &AclMessage, out: &mut Outbox) {
        let Content::Cancel(cancel) = &msg.content else {
            let reply = self.msgs.refuse(msg, now, RefusalReason::MalformedContent, "expected cancel content");
            out.send(reply);
            return;
        };
        let Some(rid) = cancel.reservation_id.clone() else {
            let reply = self.msgs.refuse(msg, now, RefusalReason::UnknownReservation, "no reservation id");
            out.send(reply);
            return;
        };
        let Some(deal) = self.deals.get(&rid).cloned() else {
            let reply = self.msgs.refuse(msg, now, RefusalReason::UnknownReservation, rid);
            out.send(reply);
            return;
        };
        if deal.user != msg.sender {
            let reply = self.msgs.refuse(msg, now, RefusalReason::NotOwner, rid);
            out.send(reply);
            return;
        }
        match deal.state {
            DealState::Cancelled | DealState::Expired => {}
            DealState::Confirmed if deal.offer.proposed_start <= now => {
                let reply = self.msgs.refuse(msg, now, RefusalReason::AlreadyStarted, rid);
                out.send(reply);
                return;
            }
            DealState::Agreed | DealState::Confirmed => {
                if let Err(e) = self.queue.cancel(&rid) {
                    let reply = self.msgs.refuse(msg, now, RefusalReason::Unexpected, e.to_string());
                    out.send(reply);
                    return;
                }
                self.set_deal_state(now, &rid, DealState::Cancelled, out);
                let agent = self.me();
                out.event(now, &agent, AgentEvent::ReservationCancelled { reservation_id: rid.clone() });
                if deal.state == DealState::Confirmed {
                    match deal.bank {
                        BankState::Settled { .. } => self.send_bank_cancel(now, &rid, out),
                        BankState::Pending { .. } | BankState::NotSent => {
                            if let Some(d) = self.deals.get_mut(&rid) {
                                d.cancel_pending = true;
                            }
                        }
                        BankState::Reversed { .. } | BankState::Flagged { .. } => {}
                    }
                }
            }
        }
        let reply = self.msgs.reply(
            msg,
            Performative::Agree,
            now,
            Content::Agree(AgreeContent {
                reservation_id: rid,
                hold_until: None,
            }),
        );
        out.send(reply);
    }

    fn expire_one(&mut self, now: Timestamp, rid: &str, out: &mut Outbox) {
        if let Err(QueueError::UnknownReservation(_)) = self.queue.expire(rid) {
            return;
        }
        self.set_deal_state(now, rid, DealState::Expired, out);
        let agent = self.me();
        out.event(now, &agent, AgentEvent::HoldExpired { reservation_id: rid.to_string() });
    }

    /// Releases every agreed-but-uncommitted hold whose deadline has passed.
    pub fn expire_holds(&mut self, now: Timestamp, out: &mut Outbox) -> Vec<String> {
        let due: Vec<String> = self
            .deals
            .values()
            .filter(|d| d.state == DealState::Agreed && d.hold_until < now)
            .map(|d| d.reservation_id.clone())
            .collect();
        for rid in &due {
            self.expire_one(now, rid, out);
        }
        self.offers.retain(|_, o| o.expires_at >= now);
        due
    }

    fn register(&mut self, now: Timestamp, out: &mut Outbox) {
        let Some(registry) = self.params.registry.clone() else {
            return;
        };
        let msg = self.msgs.build(
            Performative::Request,
            &registry,
            "registry",
            None,
            now,
            Content::Register {
                resource_id: self.me(),
                address: self.params.address.clone(),
            },
        );
        out.send(msg);
    }

    /// Samples the spot price and, with a registry configured, reports it.
    fn heartbeat(&mut self, now: Timestamp, out: &mut Outbox) {
        out.timer(now.plus_millis(self.params.heartbeat_interval_ms), Timer::Heartbeat);
        let attract = self.sample_spot(now).map(|s| {
            out.event(
                now,
                &self.params.resource_id,
                AgentEvent::SpotPrice {
                    load: s.load,
                    attractiveness: s.attractiveness,
                    price: s.price,
                },
            );
            s.attractiveness
        });
        let Some(registry) = self.params.registry.clone() else {
            return;
        };
        let msg = self.msgs.build(
            Performative::Request,
            &registry,
            "registry",
            None,
            now,
            Content::Heartbeat {
                resource_id: self.me(),
                attractiveness: attract,
            },
        );
        out.send(msg);
    }
}

impl Agent for ResourceAgent {
    fn id(&self) -> &AgentId {
        &self.params.resource_id
    }

    fn on_start(&mut self, now: Timestamp, out: &mut Outbox) {
        out.timer(now.plus_millis(self.params.sweep_interval_ms), Timer::HoldSweep);
        self.register(now, out);
        self.heartbeat(now, out);
    }

    fn handle_message(&mut self, now: Timestamp, msg: AclMessage, out: &mut Outbox) {
        match msg.performative {
            Performative::CallForProposals => self.handle_cfp(now, &msg, out),
            Performative::AcceptProposal => self.handle_accept(now, &msg, out),
            Performative::RejectProposal => self.handle_reject(&msg),
            Performative::Confirm => self.handle_confirm(now, &msg, out),
            Performative::Cancel => self.handle_cancel(now, &msg, out),
            Performative::Agree | Performative::Refuse if msg.sender == self.params.bank => {
                self.handle_bank_reply(now, &msg, out)
            }
            // A registry that lost or never saw our registration refuses heartbeats.
            Performative::Refuse if self.params.registry.as_ref() == Some(&msg.sender) => {
                if matches!(&msg.content, Content::Refusal(r) if r.reason == RefusalReason::UnknownPrincipal) {
                    self.register(now, out);
                }
            }
            _ => {}
        }
    }

    fn handle_timer(&mut self, now: Timestamp, timer: Timer, out: &mut Outbox) {
        match timer {
            Timer::HoldSweep => {
                self.expire_holds(now, out);
                out.timer(now.plus_millis(self.params.sweep_interval_ms), Timer::HoldSweep);
            }
            Timer::HoldExpiry { reservation_id } => {
                let due = self
                    .deals
                    .get(&reservation_id)
                    .is_some_and(|d| d.state == DealState::Agreed && d.hold_until < now);
                if due {
                    self.expire_one(now, &reservation_id, out);
                }
            }
            Timer::BankRetry { reservation_id, attempt } => self.on_bank_retry(now, &reservation_id, attempt, out),
            Timer::Heartbeat => self.heartbeat(now, out),
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
