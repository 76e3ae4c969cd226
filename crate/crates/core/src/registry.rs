//! Resource discovery: resources register and heartbeat, users list the
//! resources that are currently alive.

use std::any::Any;
use std::collections::BTreeMap;

use crate::agent::{Agent, Outbox, Timer};
use crate::protocol::{AclMessage, AgentId, Content, MessageFactory, Performative, RefusalReason, RegistryEntry};
use crate::time::Timestamp;

/// Entries stay alive for this many missed heartbeat intervals.
pub const MISSED_HEARTBEATS: i64 = 3;

pub struct RegistryAgent {
    id: AgentId,
    heartbeat_interval_ms: i64,
    entries: BTreeMap<AgentId, RegistryEntry>,
    msgs: MessageFactory,
}

impl RegistryAgent {
    pub fn new(id: impl Into<AgentId>, heartbeat_interval_ms: i64) -> Self {
        let id = id.into();
        RegistryAgent {
            msgs: MessageFactory::new(id.clone()),
            id,
            heartbeat_interval_ms,
            entries: BTreeMap::new(),
        }
    }

    pub fn is_alive(&self, entry: &RegistryEntry, now: Timestamp) -> bool {
        now.millis_since(entry.last_heartbeat) <= MISSED_HEARTBEATS * self.heartbeat_interval_ms
    }

    /// All known resources with liveness evaluated at `now`.
    pub fn entries(&self, now: Timestamp) -> Vec<RegistryEntry> {
        self.entries
            .values()
            .map(|e| RegistryEntry {
                alive: self.is_alive(e, now),
                ..e.clone()
            })
            .collect()
    }

    pub fn alive(&self, now: Timestamp) -> Vec<RegistryEntry> {
        self.entries(now).into_iter().filter(|e| e.alive).collect()
    }
}

impl Agent for RegistryAgent {
    fn id(&self) -> &AgentId {
        &self.id
    }

    fn handle_message(&mut self, now: Timestamp, msg: AclMessage, out: &mut Outbox) {
        if msg.performative != Performative::Request {
            return;
        }
        let reply = match &msg.content {
            Content::Register { resource_id, address } => {
                self.entries.insert(
                    resource_id.clone(),
                    RegistryEntry {
                        resource_id: resource_id.clone(),
                        address: address.clone(),
                        last_heartbeat: now,
                        alive: true,
                        attractiveness: None,
                    },
                );
                self.msgs.reply(&msg, Performative::Agree, now, Content::Ack)
            }
            Content::Heartbeat {
                resource_id,
                attractiveness,
            } => match self.entries.get_mut(resource_id) {
                Some(e) => {
                    e.last_heartbeat = now;
                    e.attractiveness = *attractiveness;
                    self.msgs.reply(&msg, Performative::Agree, now, Content::Ack)
                }
                None => self
                    .msgs
                    .refuse(&msg, now, RefusalReason::UnknownPrincipal, "register before sending heartbeats"),
            },
            Content::ListResources => {
                let entries = self.alive(now);
                self.msgs
                    .reply(&msg, Performative::Agree, now, Content::ResourceList { entries })
            }
            _ => self
                .msgs
                .refuse(&msg, now, RefusalReason::MalformedContent, "unsupported registry request"),
        };
        out.send(reply);
    }

    fn handle_timer(&mut self, _now: Timestamp, _timer: Timer, _out: &mut Outbox) {}

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

    fn request(factory: &mut MessageFactory, content: Content, now: Timestamp) -> AclMessage {
        factory.build(Performative::Request, &AgentId::new("registry"), "reg", None, now, content)
    }

    #[test]
    fn entries_expire_after_missed_heartbeats_and_revive() {
        let mut reg = RegistryAgent::new("registry", 5_000);
        let mut res = MessageFactory::new(AgentId::new("atlas1"));
        let mut out = Outbox::default();
        let t0 = Timestamp::from_secs(1_000);
        let register = Content::Register {
            resource_id: AgentId::new("atlas1"),
            address: "127.0.0.1:7001".into(),
        };
        reg.handle_message(t0, request(&mut res, register, t0), &mut out);
        assert_eq!(reg.alive(t0.plus_secs(15)).len(), 1);
        assert!(reg.alive(t0.plus_secs(16)).is_empty());
        assert_eq!(reg.entries(t0.plus_secs(16)).len(), 1);
        let hb = Content::Heartbeat {
            resource_id: AgentId::new("atlas1"),
            attractiveness: None,
        };
        let t1 = t0.plus_secs(20);
        reg.handle_message(t1, request(&mut res, hb, t1), &mut out);
        assert_eq!(reg.alive(t1).len(), 1);
    }

    #[test]
    fn unknown_heartbeat_is_refused() {
        let mut reg = RegistryAgent::new("registry", 5_000);
        let mut res = MessageFactory::new(AgentId::new("ghost"));
        let mut out = Outbox::default();
        let t = Timestamp::from_secs(5);
        let hb = Content::Heartbeat {
            resource_id: AgentId::new("ghost"),
            attractiveness: None,
        };
        reg.handle_message(t, request(&mut res, hb, t), &mut out);
        assert_eq!(out.messages[0].performative, Performative::Refuse);
    }
}
