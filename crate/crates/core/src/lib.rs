//! Core of a decentralized market for compute cycles: request documents,
//! agent messages, load-driven pricing, queue replay, signed settlement and
//! the agents that negotiate over them.

pub mod agent;
pub mod bank;
pub mod deploy;
pub mod harness;
pub mod money;
pub mod ops;
pub mod pricing;
pub mod protocol;
pub mod queuesim;
pub mod registry;
pub mod resource;
pub mod rfql;
pub mod runtime;
pub mod signing;
pub mod time;
pub mod user;

pub use agent::{Agent, AgentEvent, Outbox, Timer, TranscriptRecord};
pub use bank::{BankAgent, BankParams, Ledger};
pub use money::{Exact, Money};
pub use pricing::{DecrementFormula, LoadSnapshot, OfferDecision, PricingConfig};
pub use protocol::{AclMessage, AgentId, Content, Performative};
pub use queuesim::{MachineModel, QueueSystem, SimClock, SwfLog};
pub use registry::RegistryAgent;
pub use resource::{ResourceAgent, ResourceParams};
pub use rfql::{RfqDocument, RfqRequest};
pub use runtime::{Directory, Node, SimConfig, Simulation};
pub use signing::{Credential, KeyRing};
pub use time::Timestamp;
pub use user::{ApprovalMode, AuctionConfig, Phase, UserAgent, UserParams};
