//! The event-driven agent contract shared by the simulator and the network
//! runtime.
//!
//! Agents never perform I/O. Each handler receives the current time and an
//! [`Outbox`]; the runtime delivers the queued messages, arms the requested
//! timers and appends the transcript records.

use std::any::Any;

use serde::{Deserialize, Serialize};

use crate::money::Money;
use crate::protocol::{AclMessage, AgentId};
use crate::time::Timestamp;

/// Timer events. Timers cannot be disarmed; handlers ignore stale ones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "timer", rename_all = "snake_case")]
pub enum Timer {
    RoundTick { auction_id: String, round: u32 },
    AcceptTimeout { auction_id: String, unit: usize, offer_id: String },
    ConfirmRetry { auction_id: String, unit: usize },
    ApprovalTimeout { auction_id: String },
    HoldSweep,
    HoldExpiry { reservation_id: String },
    BankRetry { reservation_id: String, attempt: u32 },
    Heartbeat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Sent,
    Received,
}

/// Domain events recorded alongside the message log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum AgentEvent {
    AuctionStarted {
        auction_id: String,
        units: usize,
        rounds: u32,
        round_interval_ms: i64,
        request_prices: Vec<Money>,
        resources: usize,
    },
    RoundOpened {
        auction_id: String,
        round: u32,
        request_prices: Vec<Money>,
    },
    RoundClosed {
        auction_id: String,
        round: u32,
        unit: usize,
        offers: usize,
        best_price: Option<Money>,
        /// Arrival of the last reply that answered this round.
        last_reply_at: Option<Timestamp>,
    },
    BiddingClosed {
        auction_id: String,
    },
    ApprovalRequested {
        auction_id: String,
        unit: usize,
        offer_id: String,
        price: Money,
        meets_requirements: bool,
    },
    AuctionFinished {
        auction_id: String,
        outcome: String,
        winners: Vec<Option<WinRecord>>,
    },
    OfferMade {
        auction_id: String,
        unit: usize,
        round: u32,
        user: AgentId,
        requested_price: Money,
        price: Money,
        meets_requirements: bool,
        load: f64,
        attractiveness: Money,
    },
    Declined {
        auction_id: String,
        unit: usize,
        round: u32,
        reason: String,
    },
    SpotPrice {
        load: f64,
        attractiveness: Money,
        price: Money,
    },
    HoldPlaced {
        reservation_id: String,
        hold_until: Timestamp,
    },
    HoldExpired {
        reservation_id: String,
    },
    ReservationConfirmed {
        reservation_id: String,
    },
    ReservationCancelled {
        reservation_id: String,
    },
    Settled {
        reservation_id: String,
        tx_id: String,
    },
    BankFlagged {
        reservation_id: String,
        detail: String,
    },
    LedgerAppended {
        entry: crate::protocol::LedgerEntry,
    },
}

/// The winning offer of one unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinRecord {
    pub resource_id: AgentId,
    pub price: Money,
    pub reservation_id: String,
    pub meets_requirements: bool,
}

/// One line of an agent transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TranscriptRecord {
    Message {
        at: Timestamp,
        agent: AgentId,
        direction: Direction,
        message: AclMessage,
    },
    Transition {
        at: Timestamp,
        agent: AgentId,
        subject: String,
        from: String,
        to: String,
    },
    Event {
        at: Timestamp,
        agent: AgentId,
        #[serde(flatten)]
        event: AgentEvent,
    },
}

impl TranscriptRecord {
    pub fn at(&self) -> Timestamp {
        match self {
            TranscriptRecord::Message { at, .. }
            | TranscriptRecord::Transition { at, .. }
            | TranscriptRecord::Event { at, .. } => *at,
        }
    }
}

/// Side effects requested by a handler.
#[derive(Debug, Default)]
pub struct Outbox {
    pub messages: Vec<AclMessage>,
    pub timers: Vec<(Timestamp, Timer)>,
    pub records: Vec<TranscriptRecord>,
}

impl Outbox {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn send(&mut self, msg: AclMessage) {
        self.messages.push(msg);
    }

    pub fn timer(&mut self, at: Timestamp, timer: Timer) {
        self.timers.push((at, timer));
    }

    pub fn event(&mut self, at: Timestamp, agent: &AgentId, event: AgentEvent) {
        self.records.push(TranscriptRecord::Event {
            at,
            agent: agent.clone(),
            event,
        });
    }

    pub fn transition(&mut self, at: Timestamp, agent: &AgentId, subject: &str, from: &str, to: &str) {
        self.records.push(TranscriptRecord::Transition {
            at,
            agent: agent.clone(),
            subject: subject.to_string(),
            from: from.to_string(),
            to: to.to_string(),
        });
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty() && self.timers.is_empty() && self.records.is_empty()
    }
}

pub trait Agent: Send + 'static {
    fn id(&self) -> &AgentId;

    fn on_start(&mut self, now: Timestamp, out: &mut Outbox) {
        let _ = (now, out);
    }

    fn handle_message(&mut self, now: Timestamp, msg: AclMessage, out: &mut Outbox);

    fn handle_timer(&mut self, now: Timestamp, timer: Timer, out: &mut Outbox);

    fn as_any(&self) -> &dyn Any;

    fn as_any_mut(&mut self) -> &mut dyn Any;
}
