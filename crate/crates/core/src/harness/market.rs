//! An in-process market on the discrete-event runtime: one bank, optional
//! registry, any number of resources and users.

use crate::agent::TranscriptRecord;
use crate::bank::{BankAgent, BankParams, Ledger};
use crate::money::Money;
use crate::pricing::PricingConfig;
use crate::protocol::AgentId;
use crate::queuesim::QueueSystem;
use crate::registry::RegistryAgent;
use crate::resource::{ResourceAgent, ResourceParams};
use crate::rfql::{RfqDocument, ResourceProfile};
use crate::runtime::{SimConfig, Simulation};
use crate::signing::{Credential, KeyRing};
use crate::time::Timestamp;
use crate::user::{AuctionConfig, AuctionState, UserAgent, UserError, UserParams};

/// Per-agent processing cost in the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Timing {
    pub latency_ms: i64,
    pub resource_service_ms: i64,
    pub user_service_ms: i64,
    pub bank_service_ms: i64,
}

impl Default for Timing {
    fn default() -> Self {
        Timing {
            latency_ms: 20,
            resource_service_ms: 150,
            user_service_ms: 5,
            bank_service_ms: 10,
        }
    }
}

pub struct Market {
    pub sim: Simulation,
    pub bank: AgentId,
    pub registry: Option<AgentId>,
    pub resources: Vec<AgentId>,
    pub users: Vec<AgentId>,
    timing: Timing,
    key_seed: String,
}

impl Market {
    pub fn new(start: Timestamp, timing: Timing) -> Self {
        let mut sim = Simulation::new(SimConfig {
            start,
            latency_ms: timing.latency_ms,
            default_service_ms: timing.user_service_ms,
        });
        let bank = AgentId::new("bank");
        sim.add_agent(
            Box::new(BankAgent::new(BankParams::new(bank.clone()), Ledger::in_memory(), KeyRing::new())),
            Some(timing.bank_service_ms),
        );
        Market {
            sim,
            bank,
            registry: None,
            resources: Vec::new(),
            users: Vec::new(),
            timing,
            key_seed: "market".into(),
        }
    }

    pub fn credential(&self, principal: &str) -> Credential {
        Credential::derived(principal, &self.key_seed)
    }

    pub fn with_registry(&mut self, heartbeat_interval_ms: i64) -> AgentId {
        let id = AgentId::new("registry");
        self.sim
            .add_agent(Box::new(RegistryAgent::new(id.clone(), heartbeat_interval_ms)), Some(self.timing.user_service_ms));
        self.registry = Some(id.clone());
        id
    }

    fn register_with_bank(&mut self, cred: &Credential) {
        let key = cred.secret().to_vec();
        let principal = cred.principal.clone();
        self.sim
            .with_agent::<BankAgent, _>(&self.bank, |b, _, _| b.register_key(&principal, key))
            .expect("bank present")
            .expect("fresh principal");
    }

    /// Adds a resource. `tune` may adjust its parameters before start.
    pub fn add_resource(
        &mut self,
        id: &str,
        profile: ResourceProfile,
        pricing: PricingConfig,
        queue: Box<dyn QueueSystem>,
        tune: impl FnOnce(&mut ResourceParams),
    ) -> AgentId {
        let cred = self.credential(id);
        self.register_with_bank(&cred);
        let mut params = ResourceParams::new(id, profile, pricing, self.bank.clone());
        params.registry = self.registry.clone();
        tune(&mut params);
        let mut keys = KeyRing::new();
        for u in &self.users {
            keys.register_credential(&self.credential(u.as_str())).expect("unique users");
        }
        let agent = ResourceAgent::new(params, queue, cred, keys);
        self.sim.add_agent(Box::new(agent), Some(self.timing.resource_service_ms));
        let id = AgentId::new(id);
        self.resources.push(id.clone());
        id
    }

    /// Adds a user, shares its verification key with the bank and every
    /// resource, and deposits `funds` when given.
    pub fn add_user(&mut self, id: &str, funds: Option<Money>) -> AgentId {
        let cred = self.credential(id);
        self.register_with_bank(&cred);
        for r in self.resources.clone() {
            let c = cred.clone();
            self.sim
                .with_agent::<ResourceAgent, _>(&r, |a, _, _| a.keys_mut().register_credential(&c))
                .expect("resource present")
                .expect("fresh principal");
        }
        if let Some(amount) = funds {
            self.sim
                .with_agent::<BankAgent, _>(&self.bank, |b, now, _| b.credit(now, id, amount))
                .expect("bank present")
                .expect("in-memory ledger");
        }
        let mut params = UserParams::new(id, self.bank.clone());
        params.registry = self.registry.clone();
        self.sim
            .add_agent(Box::new(UserAgent::new(params, cred)), Some(self.timing.user_service_ms));
        let id = AgentId::new(id);
        self.users.push(id.clone());
        id
    }

    pub fn now(&self) -> Timestamp {
        self.sim.now()
    }

    pub fn bank(&self) -> &BankAgent {
        self.sim.agent::<BankAgent>(&self.bank).expect("bank present")
    }

    pub fn user(&self, id: &AgentId) -> &UserAgent {
        self.sim.agent::<UserAgent>(id).expect("user present")
    }

    pub fn resource(&self, id: &AgentId) -> &ResourceAgent {
        self.sim.agent::<ResourceAgent>(id).expect("resource present")
    }

    /// Starts an auction against every resource, or via the registry when
    /// `via_registry` is set.
    pub fn start_auction(
        &mut self,
        user: &AgentId,
        document: RfqDocument,
        config: AuctionConfig,
        via_registry: bool,
    ) -> Result<String, UserError> {
        let resources = if via_registry { Vec::new() } else { self.resources.clone() };
        self.sim
            .with_agent::<UserAgent, _>(user, |u, now, out| u.start_auction(now, document, config, resources, out))
            .expect("user present")
    }

    pub fn auction(&self, user: &AgentId, auction_id: &str) -> AuctionState {
        self.user(user).auction(auction_id).expect("known auction").clone()
    }

    /// Runs until the auction finishes and then for `settle_ms` more, so that
    /// bank traffic and cancellations drain. Gives up after `limit_ms`.
    pub fn run_auction(&mut self, user: &AgentId, auction_id: &str, settle_ms: i64, limit_ms: i64) -> AuctionState {
        let deadline = self.now().plus_millis(limit_ms);
        let (u, a) = (user.clone(), auction_id.to_string());
        self.sim.run_while(deadline, |sim| {
            sim.agent::<UserAgent>(&u)
                .and_then(|x| x.auction(&a))
                .is_some_and(|s| s.phase.is_terminal())
        });
        self.sim.run_for(settle_ms);
        self.auction(user, auction_id)
    }

    /// Runs until every listed auction is terminal.
    pub fn run_all(&mut self, auctions: &[(AgentId, String)], settle_ms: i64, limit_ms: i64) {
        let deadline = self.now().plus_millis(limit_ms);
        let list = auctions.to_vec();
        self.sim.run_while(deadline, |sim| {
            list.iter().all(|(u, a)| {
                sim.agent::<UserAgent>(u)
                    .and_then(|x| x.auction(a))
                    .is_some_and(|s| s.phase.is_terminal())
            })
        });
        self.sim.run_for(settle_ms);
    }

    pub fn transcript(&self) -> &[TranscriptRecord] {
        self.sim.transcript()
    }
}
