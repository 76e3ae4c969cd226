//! A scenario market on the threaded TCP runtime and the system clock, all
//! agents in one process on loopback ports.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use std::thread;
use std::time::{Duration, Instant};

use super::scenario::{resource_parts, ScenarioConfig, ScenarioError, Submission};
use crate::agent::TranscriptRecord;
use crate::bank::{BankAgent, BankParams, Ledger};
use crate::money::Money;
use crate::protocol::AgentId;
use crate::registry::RegistryAgent;
use crate::resource::{ResourceAgent, ResourceParams};
use crate::runtime::{Directory, Node};
use crate::signing::{Credential, KeyRing};
use crate::time::Timestamp;
use crate::user::{AuctionConfig, Phase, UserAgent, UserParams};

#[derive(Debug, Clone)]
pub struct LiveOptions {
    pub user: String,
    pub funds: Option<Money>,
    /// Run a registry; users then discover resources through it.
    pub registry: bool,
    pub heartbeat_ms: i64,
    pub hold_timeout_ms: Option<i64>,
    pub sweep_interval_ms: Option<i64>,
    /// Directory for per-agent JSONL transcripts.
    pub transcript_dir: Option<PathBuf>,
    /// Seed for the shared signing keys.
    pub key_seed: String,
}

impl Default for LiveOptions {
    fn default() -> Self {
        LiveOptions {
            user: "user1".into(),
            funds: Some(Money::from_units(1_000_000_000)),
            registry: true,
            heartbeat_ms: 1_000,
            hold_timeout_ms: None,
            sweep_interval_ms: None,
            transcript_dir: None,
            key_seed: "market".into(),
        }
    }
}

pub struct LiveMarket {
    pub directory: Directory,
    pub bank: Node,
    pub registry: Option<Node>,
    pub resources: Vec<Node>,
    pub user: Arc<Node>,
    pub user_id: AgentId,
}

const LOOPBACK: &str = "127.0.0.1:0";

impl LiveMarket {
    /// Starts the bank, the optional registry, every scenario resource and
    /// one user. Log replay starts now.
    pub fn start(cfg: &ScenarioConfig, base_dir: &Path, opts: &LiveOptions) -> Result<Self, ScenarioError> {
        cfg.validate(base_dir)?;
        let now = Timestamp::now();
        let directory = Directory::new();
        let transcript = |id: &str| opts.transcript_dir.as_ref().map(|d| d.join(format!("{id}.jsonl")));
        if let Some(d) = &opts.transcript_dir {
            std::fs::create_dir_all(d)?;
        }
        let cred = |p: &str| Credential::derived(p, &opts.key_seed);
        let user_cred = cred(&opts.user);

        let bank_id = AgentId::new("bank");
        let mut bank_keys = KeyRing::new();
        for p in cfg.resources.iter().map(|r| r.name.as_str()).chain([opts.user.as_str()]) {
            bank_keys.register_credential(&cred(p)).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        }
        let mut bank_agent = BankAgent::new(BankParams::new(bank_id.clone()), Ledger::in_memory(), bank_keys);
        if let Some(amount) = opts.funds {
            bank_agent
                .credit(now, &opts.user, amount)
                .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        }
        let bank = Node::spawn(Box::new(bank_agent), LOOPBACK, directory.clone(), transcript("bank").as_deref())?;

        let registry = if opts.registry {
            let agent = RegistryAgent::new(AgentId::new("registry"), opts.heartbeat_ms);
            Some(Node::spawn(Box::new(agent), LOOPBACK, directory.clone(), transcript("registry").as_deref())?)
        } else {
            None
        };
        let registry_id = registry.as_ref().map(|n| n.id().clone());

        let mut resources = Vec::new();
        for r in &cfg.resources {
            let parts = resource_parts(cfg, r, base_dir, now)?;
            let mut params = ResourceParams::new(r.name.as_str(), parts.profile, parts.pricing, bank_id.clone());
            params.registry = registry_id.clone();
            params.heartbeat_interval_ms = opts.heartbeat_ms;
            if let Some(h) = opts.hold_timeout_ms {
                params.hold_timeout_ms = h;
            }
            if let Some(s) = opts.sweep_interval_ms {
                params.sweep_interval_ms = s;
            }
            let mut keys = KeyRing::new();
            keys.register_credential(&user_cred).map_err(|e| ScenarioError::Invalid(e.to_string()))?;
            let agent = ResourceAgent::new(params, Box::new(parts.queue), cred(&r.name), keys);
            resources.push(Node::spawn(Box::new(agent), LOOPBACK, directory.clone(), transcript(&r.name).as_deref())?);
        }

        let mut params = UserParams::new(opts.user.as_str(), bank_id);
        params.registry = registry_id;
        let user = Node::spawn(
            Box::new(UserAgent::new(params, user_cred)),
            LOOPBACK,
            directory.clone(),
            transcript(&opts.user).as_deref(),
        )?;
        Ok(LiveMarket {
            directory,
            bank,
            registry,
            resources,
            user: Arc::new(user),
            user_id: AgentId::new(opts.user.as_str()),
        })
    }

    pub fn resource_ids(&self) -> Vec<AgentId> {
        self.resources.iter().map(|n| n.id().clone()).collect()
    }

    /// Every node's transcript merged in time order.
    pub fn transcript(&self) -> Vec<TranscriptRecord> {
        let mut all: Vec<TranscriptRecord> = std::iter::once(&self.bank)
            .chain(self.registry.as_ref())
            .chain(self.resources.iter())
            .chain(std::iter::once(&*self.user))
            .flat_map(|n| n.transcript())
            .collect();
        all.sort_by_key(|r| r.at());
        all
    }

    /// Runs every workload of `cfg` in order on the wall clock, waiting for
    /// each auction to finish before the next. With `rounds` set it overrides
    /// the per-workload round count.
    pub fn run_workloads(&self, cfg: &ScenarioConfig, rounds: Option<u32>) -> Vec<Submission> {
        let invite = if self.registry.is_some() { Vec::new() } else { self.resource_ids() };
        let mut submissions = Vec::new();
        for rep in 0..cfg.repetitions {
            for w in &cfg.workloads {
                let n = rounds.unwrap_or(w.rounds);
                let config = AuctionConfig {
                    approval: cfg.approval,
                    ..AuctionConfig::new(n, cfg.round_interval_ms())
                };
                let (doc_cfg, w2, tag, invite) = (cfg.clone(), w.clone(), format!("r{rep}"), invite.clone());
                let started = self.user.call::<UserAgent, _>(move |u, now, out| {
                    let doc = doc_cfg.document(&w2, now, &tag);
                    u.start_auction(now, doc, config, invite, out)
                });
                let mut sub = Submission {
                    repetition: rep,
                    workload: w.name.clone(),
                    auction_id: None,
                    phase: None,
                    error: None,
                };
                match started {
                    None => sub.error = Some("user agent is not running".into()),
                    Some(Err(e)) => sub.error = Some(e.to_string()),
                    Some(Ok(id)) => {
                        let limit = Duration::from_millis(((n as i64 + 2) * cfg.round_interval_ms() + 120_000) as u64);
                        sub.phase = self.wait_for(&id, limit);
                        sub.auction_id = Some(id);
                    }
                }
                submissions.push(sub);
                thread::sleep(Duration::from_secs(cfg.gap_secs.max(0) as u64));
            }
        }
        submissions
    }

    /// Polls until the auction is terminal or `limit` passes; returns the last phase seen.
    pub fn wait_for(&self, auction_id: &str, limit: Duration) -> Option<Phase> {
        let until = Instant::now() + limit;
        loop {
            let id = auction_id.to_string();
            let phase = self
                .user
                .call::<UserAgent, _>(move |u, _, _| u.auction(&id).map(|a| a.phase))
                .flatten();
            if phase.is_none_or(|p| p.is_terminal()) || Instant::now() >= until {
                return phase;
            }
            thread::sleep(Duration::from_millis(50));
        }
    }
}
