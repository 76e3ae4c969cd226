//! Discrete-event runtime with a virtual clock.
//!
//! Every agent has a FIFO inbox. Handling one message or timer occupies the
//! agent for its service time, so queued work delays later work the way a
//! single-threaded agent would on a real host. Messages take a fixed
//! network latency.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, VecDeque};

use crate::agent::{Agent, Direction, Outbox, Timer, TranscriptRecord};
use crate::protocol::{AclMessage, AgentId};
use crate::time::Timestamp;

/// What happens to one message in flight.
#[derive(Debug, Clone, PartialEq)]
pub enum Fault {
    Deliver,
    Drop,
    /// Deliver after this many extra milliseconds.
    Delay(i64),
    /// Deliver a different message instead.
    Replace(AclMessage),
}

pub type FaultInjector = Box<dyn FnMut(Timestamp, &AclMessage) -> Fault + Send>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimConfig {
    pub start: Timestamp,
    pub latency_ms: i64,
    pub default_service_ms: i64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            start: Timestamp::from_secs(1_700_000_000),
            latency_ms: 20,
            default_service_ms: 10,
        }
    }
}

#[derive(Debug)]
enum Work {
    Message(AclMessage),
    Timer(Timer),
}

#[derive(Debug)]
enum Event {
    Arrive { to: AgentId, work: Work },
    Process { agent: AgentId },
}

struct Slot {
    agent: Box<dyn Agent>,
    inbox: VecDeque<Work>,
    busy_until: Timestamp,
    service_ms: i64,
    scheduled: bool,
    down: bool,
}

pub struct Simulation {
    config: SimConfig,
    now: Timestamp,
    slots: BTreeMap<AgentId, Slot>,
    queue: BinaryHeap<Reverse<(Timestamp, u64)>>,
    events: HashMap<u64, Event>,
    seq: u64,
    transcript: Vec<TranscriptRecord>,
    undeliverable: Vec<AclMessage>,
    faults: Option<FaultInjector>,
    delivered: u64,
}

impl Simulation {
    pub fn new(config: SimConfig) -> Self {
        Simulation {
            now: config.start,
            config,
            slots: BTreeMap::new(),
            queue: BinaryHeap::new(),
            events: HashMap::new(),
            seq: 0,
            transcript: Vec::new(),
            undeliverable: Vec::new(),
            faults: None,
            delivered: 0,
        }
    }

    pub fn now(&self) -> Timestamp {
        self.now
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn set_faults(&mut self, faults: FaultInjector) {
        self.faults = Some(faults);
    }

    pub fn clear_faults(&mut self) {
        self.faults = None;
    }

    /// Adds an agent and runs its start handler at the current time.
    pub fn add_agent(&mut self, agent: Box<dyn Agent>, service_ms: Option<i64>) {
        let id = agent.id().clone();
        self.slots.insert(
            id.clone(),
            Slot {
                agent,
                inbox: VecDeque::new(),
                busy_until: self.now,
                service_ms: service_ms.unwrap_or(self.config.default_service_ms),
                scheduled: false,
                down: false,
            },
        );
        let mut out = Outbox::new();
        let now = self.now;
        self.slots.get_mut(&id).expect("just inserted").agent.on_start(now, &mut out);
        self.dispatch(&id, now, out);
    }

    /// A down agent loses everything addressed to it, timers included. It
    /// restarts from its start handler when brought back up.
    pub fn set_down(&mut self, id: &AgentId, down: bool) {
        let now = self.now;
        let Some(slot) = self.slots.get_mut(id) else {
            return;
        };
        let was_down = slot.down;
        slot.down = down;
        if down {
            slot.inbox.clear();
        } else if was_down {
            let mut out = Outbox::new();
            slot.agent.on_start(now, &mut out);
            self.dispatch(id, now, out);
        }
    }

    pub fn contains(&self, id: &AgentId) -> bool {
        self.slots.contains_key(id)
    }

    pub fn agent<T: Agent>(&self, id: &AgentId) -> Option<&T> {
        self.slots.get(id)?.agent.as_any().downcast_ref::<T>()
    }

    /// Runs `f` against an agent as if it were handling an event now, then
    /// delivers whatever it queued.
    pub fn with_agent<T: Agent, R>(&mut self, id: &AgentId, f: impl FnOnce(&mut T, Timestamp, &mut Outbox) -> R) -> Option<R> {
        let now = self.now;
        let mut out = Outbox::new();
        let agent = self.slots.get_mut(id)?.agent.as_any_mut().downcast_mut::<T>()?;
        let r = f(agent, now, &mut out);
        self.dispatch(id, now, out);
        Some(r)
    }

    pub fn transcript(&self) -> &[TranscriptRecord] {
        &self.transcript
    }

    pub fn take_transcript(&mut self) -> Vec<TranscriptRecord> {
        std::mem::take(&mut self.transcript)
    }

    pub fn undeliverable(&self) -> &[AclMessage] {
        &self.undeliverable
    }

    pub fn delivered(&self) -> u64 {
        self.delivered
    }

    /// Time of the next pending event.
    pub fn peek(&self) -> Option<Timestamp> {
        self.queue.peek().map(|Reverse((t, _))| *t)
    }

    fn push(&mut self, at: Timestamp, event: Event) {
        self.seq += 1;
        self.queue.push(Reverse((at, self.seq)));
        self.events.insert(self.seq, event);
    }

    fn dispatch(&mut self, owner: &AgentId, sent_at: Timestamp, out: Outbox) {
        self.transcript.extend(out.records);
        for (at, timer) in out.timers {
            self.push(
                at.max(sent_at),
                Event::Arrive {
                    to: owner.clone(),
                    work: Work::Timer(timer),
                },
            );
        }
        for msg in out.messages {
            self.transcript.push(TranscriptRecord::Message {
                at: sent_at,
                agent: msg.sender.clone(),
                direction: Direction::Sent,
                message: msg.clone(),
            });
            let fault = match self.faults.as_mut() {
                Some(f) => f(sent_at, &msg),
                None => Fault::Deliver,
            };
            let arrive = sent_at.plus_millis(self.config.latency_ms);
            let (msg, arrive) = match fault {
                Fault::Deliver => (msg, arrive),
                Fault::Drop => continue,
                Fault::Delay(ms) => (msg, arrive.plus_millis(ms.max(0))),
                Fault::Replace(m) => (m, arrive),
            };
            let to = msg.receiver.clone();
            self.push(arrive, Event::Arrive { to, work: Work::Message(msg) });
        }
    }

    /// Processes the next event. Returns false when nothing is pending.
    pub fn step(&mut self) -> bool {
        let Some(Reverse((at, seq))) = self.queue.pop() else {
            return false;
        };
        let event = self.events.remove(&seq).expect("every queued key has an event");
        self.now = self.now.max(at);
        match event {
            Event::Arrive { to, work } => {
                let Some(slot) = self.slots.get_mut(&to) else {
                    if let Work::Message(m) = work {
                        self.undeliverable.push(m);
                    }
                    return true;
                };
                if slot.down {
                    return true;
                }
                slot.inbox.push_back(work);
                if !slot.scheduled {
                    slot.scheduled = true;
                    let start = slot.busy_until.max(self.now);
                    self.push(start, Event::Process { agent: to });
                }
            }
            Event::Process { agent } => self.process(agent),
        }
        true
    }

    fn process(&mut self, id: AgentId) {
        let now = self.now;
        let Some(slot) = self.slots.get_mut(&id) else {
            return;
        };
        let Some(work) = slot.inbox.pop_front() else {
            slot.scheduled = false;
            return;
        };
        let mut out = Outbox::new();
        match work {
            Work::Message(msg) => {
                self.delivered += 1;
                self.transcript.push(TranscriptRecord::Message {
                    at: now,
                    agent: id.clone(),
                    direction: Direction::Received,
                    message: msg.clone(),
                });
                slot.agent.handle_message(now, msg, &mut out);
            }
            Work::Timer(t) => slot.agent.handle_timer(now, t, &mut out),
        }
        let done = now.plus_millis(slot.service_ms);
        slot.busy_until = done;
        let more = !slot.inbox.is_empty();
        if more {
            self.push(done, Event::Process { agent: id.clone() });
        } else {
            slot.scheduled = false;
        }
        self.dispatch(&id, done, out);
    }

    /// Runs every event scheduled at or before `until`, then advances the clock to it.
    pub fn run_until(&mut self, until: Timestamp) {
        while self.peek().is_some_and(|t| t <= until) {
            self.step();
        }
        self.now = self.now.max(until);
    }

    pub fn run_for(&mut self, ms: i64) {
        let until = self.now.plus_millis(ms);
        self.run_until(until);
    }

    /// Runs until `done` holds, checking after every event, or until the
    /// clock passes `deadline`. Returns whether `done` held.
    pub fn run_while(&mut self, deadline: Timestamp, mut done: impl FnMut(&Simulation) -> bool) -> bool {
        loop {
            if done(self) {
                return true;
            }
            match self.peek() {
                Some(t) if t <= deadline => {
                    self.step();
                }
                _ => {
                    self.now = self.now.max(deadline);
                    return done(self);
                }
            }
        }
    }
}
