use std::fmt;

use serde::{Deserialize, Serialize};

use crate::money::Money;
use crate::rfql::RfqRequest;
use crate::signing::SignedDocument;
use crate::time::Timestamp;

pub const ONTOLOGY: &str = "ramp-rfq-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Performative {
    #[serde(rename = "cfp")]
    CallForProposals,
    #[serde(rename = "propose")]
    Propose,
    #[serde(rename = "refuse")]
    Refuse,
    #[serde(rename = "reject-proposal")]
    RejectProposal,
    #[serde(rename = "accept-proposal")]
    AcceptProposal,
    #[serde(rename = "agree")]
    Agree,
    #[serde(rename = "confirm")]
    Confirm,
    #[serde(rename = "cancel")]
    Cancel,
    #[serde(rename = "request")]
    Request,
}

impl Performative {
    pub const ALL: [Performative; 9] = [
        Self::CallForProposals,
        Self::Propose,
        Self::Refuse,
        Self::RejectProposal,
        Self::AcceptProposal,
        Self::Agree,
        Self::Confirm,
        Self::Cancel,
        Self::Request,
    ];

    pub fn wire_name(self) -> &'static str {
        match self {
            Self::CallForProposals => "cfp",
            Self::Propose => "propose",
            Self::Refuse => "refuse",
            Self::RejectProposal => "reject-proposal",
            Self::AcceptProposal => "accept-proposal",
            Self::Agree => "agree",
            Self::Confirm => "confirm",
            Self::Cancel => "cancel",
            Self::Request => "request",
        }
    }
}

impl fmt::Display for Performative {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.wire_name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub String);

impl AgentId {
    pub fn new(id: impl Into<String>) -> Self {
        AgentId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for AgentId {
    fn from(s: &str) -> Self {
        AgentId(s.to_string())
    }
}

impl From<String> for AgentId {
    fn from(s: String) -> Self {
        AgentId(s)
    }
}

/// Conversation id for one unit of one auction, stable across rounds.
pub fn new_conversation_id(auction_id: &str, unit_index: usize) -> String {
    format!("{auction_id}/u{unit_index}")
}

/// Splits a conversation id back into `(auction_id, unit_index)`.
pub fn parse_conversation_id(id: &str) -> Option<(&str, usize)> {
    let (auction, unit) = id.rsplit_once("/u")?;
    Some((auction, unit.parse().ok()?))
}

/// A resource's bid for one unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Offer {
    pub offer_id: String,
    pub resource_id: AgentId,
    pub unit_index: usize,
    /// Per core-hour.
    pub price: Money,
    pub proposed_start: Timestamp,
    /// False for a non-binding best offer made below the requested price.
    pub meets_requirements: bool,
    pub round: u32,
    /// Set by the receiver on arrival.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub received_at: Option<Timestamp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfqContent {
    pub auction_id: String,
    pub unit_index: usize,
    pub round: u32,
    pub request: RfqRequest,
    /// Offers made in reply stay valid until this instant.
    pub offer_expires_at: Timestamp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RefusalReason {
    StaticMismatch,
    NoCapacity,
    BelowFloor,
    MalformedContent,
    UnknownOffer,
    OfferExpired,
    NoLongerFeasible,
    BadSignature,
    TermsMismatch,
    UnknownReservation,
    NotOwner,
    AlreadyStarted,
    AlreadyCancelled,
    UnknownPrincipal,
    NotSettled,
    Unexpected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefusalContent {
    pub reason: RefusalReason,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptContent {
    pub offer_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgreeContent {
    pub reservation_id: String,
    /// The tentative slot is released if no commit arrives by this instant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hold_until: Option<Timestamp>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfirmContent {
    pub reservation_id: String,
    pub signed_document: SignedDocument,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CancelContent {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reservation_id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedContent {
    pub signed_document: SignedDocument,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntryKind {
    Deposit,
    Settlement,
    ReCredit,
}

/// One row of the bank's ledger.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub seq: u64,
    pub tx_id: String,
    pub kind: EntryKind,
    pub debit_account: String,
    pub credit_account: String,
    pub amount: Money,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reservation_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rfq_digest: Option<String>,
    /// For a re-credit, the settlement it reverses.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reverses: Option<String>,
    pub timestamp: Timestamp,
    pub prev_hash: String,
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Statement {
    pub principal: String,
    pub balance: Money,
    pub entries: Vec<LedgerEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceiptContent {
    pub tx_id: String,
    /// `entry_kind` on the wire; `kind` is taken by the content tag.
    #[serde(rename = "entry_kind")]
    pub kind: EntryKind,
    pub reservation_id: String,
    pub amount: Money,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub resource_id: AgentId,
    pub address: String,
    pub last_heartbeat: Timestamp,
    pub alive: bool,
    /// Most recent attractiveness sample reported with a heartbeat.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attractiveness: Option<Money>,
}

/// Negotiation payloads; the tag is the `kind` field on the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Content {
    Rfq(RfqContent),
    Offer { offer: Offer },
    Accept(AcceptContent),
    Agree(AgreeContent),
    Confirm(ConfirmContent),
    Cancel(CancelContent),
    Refusal(RefusalContent),
    BankUpdate(SignedContent),
    BankCancel(SignedContent),
    BalanceQuery(SignedContent),
    Receipt(ReceiptContent),
    Balance { statement: Statement },
    Register { resource_id: AgentId, address: String },
    Heartbeat {
        resource_id: AgentId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        attractiveness: Option<Money>,
    },
    ListResources,
    ResourceList { entries: Vec<RegistryEntry> },
    Ack,
}

impl Content {
    pub fn kind(&self) -> &'static str {
        match self {
            Content::Rfq(_) => "rfq",
            Content::Offer { .. } => "offer",
            Content::Accept(_) => "accept",
            Content::Agree(_) => "agree",
            Content::Confirm(_) => "confirm",
            Content::Cancel(_) => "cancel",
            Content::Refusal(_) => "refusal",
            Content::BankUpdate(_) => "bank_update",
            Content::BankCancel(_) => "bank_cancel",
            Content::BalanceQuery(_) => "balance_query",
            Content::Receipt(_) => "receipt",
            Content::Balance { .. } => "balance",
            Content::Register { .. } => "register",
            Content::Heartbeat { .. } => "heartbeat",
            Content::ListResources => "list_resources",
            Content::ResourceList { .. } => "resource_list",
            Content::Ack => "ack",
        }
    }

    /// Whether this payload may travel under `p`.
    pub fn allowed_with(&self, p: Performative) -> bool {
        use Performative as P;
        match self {
            Content::Rfq(_) => p == P::CallForProposals,
            Content::Offer { .. } => p == P::Propose,
            Content::Accept(_) => matches!(p, P::AcceptProposal | P::RejectProposal),
            Content::Agree(_) => p == P::Agree,
            Content::Confirm(_) => p == P::Confirm,
            Content::Cancel(_) => p == P::Cancel,
            Content::Refusal(_) => p == P::Refuse,
            Content::BankUpdate(_) | Content::BankCancel(_) | Content::BalanceQuery(_) => p == P::Request,
            Content::Receipt(_) | Content::Balance { .. } | Content::ResourceList { .. } | Content::Ack => p == P::Agree,
            Content::Register { .. } | Content::Heartbeat { .. } | Content::ListResources => p == P::Request,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AclMessage {
    pub performative: Performative,
    pub sender: AgentId,
    pub receiver: AgentId,
    pub conversation_id: String,
    pub in_reply_to: Option<String>,
    pub message_id: String,
    pub ontology: String,
    pub sent_at: Timestamp,
    pub content: Content,
}

impl AclMessage {
    pub fn is_consistent(&self) -> bool {
        self.ontology == ONTOLOGY && self.content.allowed_with(self.performative)
    }

    pub fn offer(&self) -> Option<&Offer> {
        match &self.content {
            Content::Offer { offer } => Some(offer),
            _ => None,
        }
    }
}

/// Issues message ids of the form `sender#n`.
#[derive(Debug, Clone)]
pub struct MessageFactory {
    sender: AgentId,
    next: u64,
}

impl MessageFactory {
    pub fn new(sender: AgentId) -> Self {
        MessageFactory { sender, next: 0 }
    }

    pub fn sender(&self) -> &AgentId {
        &self.sender
    }

    pub fn next_id(&mut self) -> String {
        self.next += 1;
        format!("{}#{}", self.sender, self.next)
    }

    pub fn build(
        &mut self,
        performative: Performative,
        receiver: &AgentId,
        conversation_id: &str,
        in_reply_to: Option<&str>,
        now: Timestamp,
        content: Content,
    ) -> AclMessage {
        AclMessage {
            performative,
            sender: self.sender.clone(),
            receiver: receiver.clone(),
            conversation_id: conversation_id.to_string(),
            in_reply_to: in_reply_to.map(str::to_string),
            message_id: self.next_id(),
            ontology: ONTOLOGY.to_string(),
            sent_at: now,
            content,
        }
    }

    /// A reply on the same conversation, addressed to the original sender.
    pub fn reply(&mut self, to: &AclMessage, performative: Performative, now: Timestamp, content: Content) -> AclMessage {
        self.build(
            performative,
            &to.sender,
            &to.conversation_id,
            Some(&to.message_id),
            now,
            content,
        )
    }

    pub fn refuse(&mut self, to: &AclMessage, now: Timestamp, reason: RefusalReason, detail: impl Into<String>) -> AclMessage {
        self.reply(
            to,
            Performative::Refuse,
            now,
            Content::Refusal(RefusalContent {
                reason,
                detail: detail.into(),
            }),
        )
    }
}
