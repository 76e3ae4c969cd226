//! Configuration for agents run as separate processes.
//!
//! A resource agent is described by one JSON file; see [`ResourceConfig`].
//! Relative paths inside the file resolve against the file's directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::synth::constant_load;
use crate::money::Money;
use crate::pricing::{PricingConfig, PricingError};
use crate::protocol::AgentId;
use crate::queuesim::{MachineModel, QueueError, SimClock, SwfError, SwfLog};
use crate::resource::{ResourceAgent, ResourceParams};
use crate::rfql::ResourceProfile;
use crate::runtime::Directory;
use crate::signing::{Credential, KeyRing, SignatureError};
use crate::time::Timestamp;

pub const RESOURCE_PORT: u16 = 7701;
pub const BANK_PORT: u16 = 7702;
pub const REGISTRY_PORT: u16 = 7703;

#[derive(Debug, Error)]
pub enum DeployError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Pricing(#[from] PricingError),
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error(transparent)]
    Swf(#[from] SwfError),
    #[error(transparent)]
    Key(#[from] SignatureError),
}

/// Another agent's id and `host:port`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoint {
    pub id: AgentId,
    pub address: String,
}

impl Endpoint {
    /// Parses `id=host:port`.
    pub fn parse(text: &str) -> Result<Self, DeployError> {
        let (id, address) = text
            .split_once('=')
            .filter(|(id, addr)| !id.is_empty() && addr.contains(':'))
            .ok_or_else(|| DeployError::Invalid(format!("expected id=host:port, got {text:?}")))?;
        Ok(Endpoint {
            id: AgentId::new(id),
            address: address.to_string(),
        })
    }
}

/// Records every endpoint in `directory`.
pub fn publish<'a>(directory: &Directory, endpoints: impl IntoIterator<Item = &'a Endpoint>) {
    for e in endpoints {
        directory.insert(e.id.clone(), e.address.clone());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceBand {
    pub start_price: Money,
    pub min_price: Money,
    #[serde(default = "default_rounds")]
    pub anticipated_rounds: u32,
}

fn default_rounds() -> u32 {
    3
}

/// Where a resource's queue state comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QueueConfig {
    /// Replays an SWF log. `time_offset` is the log second that lines up
    /// with `start` (RFC 3339, default: when the agent starts).
    Swf {
        log: PathBuf,
        #[serde(default)]
        time_offset: i64,
        #[serde(default)]
        start: Option<String>,
    },
    /// A fixed fraction of the machine is always busy.
    Constant {
        load: f64,
        #[serde(default = "default_horizon")]
        horizon_secs: i64,
    },
    /// Nothing else runs on the machine.
    Empty,
}

fn default_horizon() -> i64 {
    30 * 24 * 3600
}

fn default_listen() -> String {
    format!("0.0.0.0:{RESOURCE_PORT}")
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

/// A resource agent's configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceConfig {
    pub resource_id: AgentId,
    #[serde(default = "default_listen")]
    pub listen: String,
    /// Address reported to the registry; defaults to `listen` with an
    /// unspecified host replaced by 127.0.0.1.
    #[serde(default)]
    pub advertise: Option<String>,
    pub profile: ResourceProfile,
    pub price_band: PriceBand,
    pub queue: QueueConfig,
    #[serde(default = "default_hold_ms")]
    pub hold_timeout_ms: i64,
    #[serde(default = "default_sweep_ms")]
    pub sweep_interval_ms: i64,
    #[serde(default = "default_heartbeat_ms")]
    pub heartbeat_interval_ms: i64,
    pub bank: Endpoint,
    #[serde(default)]
    pub registry: Option<Endpoint>,
    /// Hex-encoded signing key of this resource.
    pub key: PathBuf,
    /// Directory of `<user>.key` files used to check users' signatures.
    pub user_keys: PathBuf,
}

impl ResourceConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, DeployError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| DeployError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| DeployError::Json {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn advertised_address(&self) -> String {
        if let Some(a) = &self.advertise {
            return a.clone();
        }
        match self.listen.rsplit_once(':') {
            Some(("0.0.0.0" | "" | "[::]", port)) => format!("127.0.0.1:{port}"),
            _ => self.listen.clone(),
        }
    }

    pub fn pricing(&self) -> Result<PricingConfig, DeployError> {
        let b = &self.price_band;
        Ok(PricingConfig::new(b.start_price, b.min_price, b.anticipated_rounds)?)
    }

    pub fn queue_model(&self, base_dir: &Path, now: Timestamp) -> Result<MachineModel, DeployError> {
        let name = self.resource_id.to_string();
        let cores = self.profile.total_cores();
        let (log, clock) = match &self.queue {
            QueueConfig::Swf { log, time_offset, start } => {
                let start = match start {
                    Some(s) => Timestamp::parse_rfc3339(s).ok_or_else(|| DeployError::Invalid(format!("bad start {s:?}")))?,
                    None => now,
                };
                (SwfLog::load(base_dir.join(log))?, SimClock::new(start, *time_offset)?)
            }
            QueueConfig::Constant { load, horizon_secs } => {
                if !(0.0..=1.0).contains(load) {
                    return Err(DeployError::Invalid(format!("load {load} outside [0, 1]")));
                }
                let week = 7 * 24 * 3600;
                (constant_load(&name, cores, *load, 0, week + horizon_secs, 6 * 3600), SimClock::new(now, week)?)
            }
            QueueConfig::Empty => (SwfLog::default(), SimClock::new(now, 0)?),
        };
        Ok(MachineModel::new(name, cores, Arc::new(log), clock)?)
    }

    /// Builds the agent, reading keys and the queue log from disk.
    pub fn build(&self, base_dir: &Path, now: Timestamp) -> Result<ResourceAgent, DeployError> {
        if self.profile.total_cores() == 0 {
            return Err(DeployError::Invalid("profile has no cores".into()));
        }
        let mut params = ResourceParams::new(self.resource_id.clone(), self.profile.clone(), self.pricing()?, self.bank.id.clone());
        params.registry = self.registry.as_ref().map(|r| r.id.clone());
        params.address = self.advertised_address();
        params.hold_timeout_ms = self.hold_timeout_ms;
        params.sweep_interval_ms = self.sweep_interval_ms;
        params.heartbeat_interval_ms = self.heartbeat_interval_ms;
        let credential = Credential::load(self.resource_id.as_str(), base_dir.join(&self.key))?;
        let keys = KeyRing::load_dir(base_dir.join(&self.user_keys))?;
        let queue = self.queue_model(base_dir, now)?;
        Ok(ResourceAgent::new(params, Box::new(queue), credential, keys))
    }

    /// The bank and registry endpoints.
    pub fn peers(&self) -> Vec<Endpoint> {
        std::iter::once(self.bank.clone()).chain(self.registry.clone()).collect()
    }
}
