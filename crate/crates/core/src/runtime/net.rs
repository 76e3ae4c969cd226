//! Threaded TCP runtime on the system clock.
//!
//! Each agent runs on its own thread with an inbox channel. Peers exchange
//! length-prefixed JSON frames. A connection opened by a peer is reused for
//! replies to it, so agents that never listen publicly (users) still get
//! answers. Addresses come from a [`Directory`] that is seeded statically and
//! extended from registry traffic.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crate::agent::{Agent, Direction, Outbox, Timer, TranscriptRecord};
use crate::protocol::{encode_message, AclMessage, AgentId, Content, FrameDecoder};
use crate::time::Timestamp;

/// Agent id to `host:port`.
#[derive(Clone, Default)]
pub struct Directory(Arc<RwLock<HashMap<AgentId, String>>>);

impl Directory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, id: impl Into<AgentId>, addr: impl Into<String>) {
        self.0.write().expect("directory lock").insert(id.into(), addr.into());
    }

    pub fn get(&self, id: &AgentId) -> Option<String> {
        self.0.read().expect("directory lock").get(id).cloned()
    }

    fn learn(&self, msg: &AclMessage) {
        match &msg.content {
            Content::Register { resource_id, address } if !address.is_empty() => {
                self.insert(resource_id.clone(), address.clone())
            }
            Content::ResourceList { entries } => {
                for e in entries.iter().filter(|e| !e.address.is_empty()) {
                    self.insert(e.resource_id.clone(), e.address.clone());
                }
            }
            _ => {}
        }
    }
}

type Command = Box<dyn FnOnce(&mut dyn Agent, Timestamp, &mut Outbox) + Send>;

enum Input {
    Message(AclMessage),
    Command(Command),
    Stop,
}

type Routes = Arc<Mutex<HashMap<AgentId, TcpStream>>>;

/// A running agent.
pub struct Node {
    id: AgentId,
    addr: SocketAddr,
    tx: Sender<Input>,
    stopping: Arc<AtomicBool>,
    transcript: Arc<Mutex<Vec<TranscriptRecord>>>,
    threads: Vec<JoinHandle<()>>,
}

impl Node {
    /// Binds `listen`, registers the bound address in `directory` and starts
    /// the agent. With `transcript_path` set, records are also appended there
    /// as JSON lines.
    pub fn spawn(
        agent: Box<dyn Agent>,
        listen: &str,
        directory: Directory,
        transcript_path: Option<&Path>,
    ) -> io::Result<Node> {
        let listener = TcpListener::bind(listen)?;
        let addr = listener.local_addr()?;
        let id = agent.id().clone();
        directory.insert(id.clone(), addr.to_string());
        let file = match transcript_path {
            Some(p) => Some(BufWriter::new(OpenOptions::new().create(true).append(true).open(p)?)),
            None => None,
        };
        let (tx, rx) = mpsc::channel();
        let routes: Routes = Arc::new(Mutex::new(HashMap::new()));
        let stopping = Arc::new(AtomicBool::new(false));
        let transcript = Arc::new(Mutex::new(Vec::new()));

        let accept = {
            let tx = tx.clone();
            let routes = routes.clone();
            let stopping = stopping.clone();
            thread::Builder::new().name(format!("{id}-accept")).spawn(move || {
                for stream in listener.incoming() {
                    if stopping.load(Ordering::SeqCst) {
                        break;
                    }
                    match stream {
                        Ok(s) => spawn_reader(s, tx.clone(), routes.clone(), stopping.clone()),
                        Err(e) => tracing::warn!("accept failed: {e}"),
                    }
                }
            })?
        };
        let main = {
            let ctx = Loop {
                agent,
                rx,
                tx: tx.clone(),
                routes,
                directory,
                stopping: stopping.clone(),
                transcript: transcript.clone(),
                file,
                timers: BinaryHeap::new(),
                timer_seq: 0,
                timer_map: HashMap::new(),
            };
            thread::Builder::new().name(id.to_string()).spawn(move || ctx.run())?
        };
        Ok(Node {
            id,
            addr,
            tx,
            stopping,
            transcript,
            threads: vec![accept, main],
        })
    }

    pub fn id(&self) -> &AgentId {
        &self.id
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn transcript(&self) -> Vec<TranscriptRecord> {
        self.transcript.lock().expect("transcript lock").clone()
    }

    /// Runs `f` on the agent's own thread between two events and waits for
    /// the result. Returns `None` if the agent has a different type or has
    /// stopped.
    pub fn call<T: Agent, R: Send + 'static>(
        &self,
        f: impl FnOnce(&mut T, Timestamp, &mut Outbox) -> R + Send + 'static,
    ) -> Option<R> {
        let (rtx, rrx) = mpsc::sync_channel(1);
        let cmd: Command = Box::new(move |agent, now, out| {
            if let Some(a) = agent.as_any_mut().downcast_mut::<T>() {
                let _ = rtx.send(f(a, now, out));
            }
        });
        self.tx.send(Input::Command(cmd)).ok()?;
        rrx.recv_timeout(Duration::from_secs(30)).ok()
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        if self.stopping.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = self.tx.send(Input::Stop);
        // Wake the accept loop.
        let _ = TcpStream::connect(self.addr);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for Node {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn spawn_reader(stream: TcpStream, tx: Sender<Input>, routes: Routes, stopping: Arc<AtomicBool>) {
    let _ = thread::Builder::new().name("reader".into()).spawn(move || {
        let mut stream = stream;
        let Ok(writer) = stream.try_clone() else {
            return;
        };
        let mut decoder = FrameDecoder::new();
        let mut buf = [0u8; 8192];
        let mut known: Option<AgentId> = None;
        loop {
            if stopping.load(Ordering::SeqCst) {
                break;
            }
            let n = match stream.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => n,
            };
            decoder.push(&buf[..n]);
            loop {
                match decoder.next_message() {
                    Ok(Some(msg)) => {
                        if known.as_ref() != Some(&msg.sender) {
                            if let Ok(w) = writer.try_clone() {
                                routes.lock().expect("routes lock").entry(msg.sender.clone()).or_insert(w);
                            }
                            known = Some(msg.sender.clone());
                        }
                        if tx.send(Input::Message(msg)).is_err() {
                            return;
                        }
                    }
                    Ok(None) => break,
                    Err(e) => {
                        tracing::warn!("dropping connection: {e}");
                        let _ = stream.shutdown(Shutdown::Both);
                        return;
                    }
                }
            }
        }
        if let Some(id) = known {
            let mut r = routes.lock().expect("routes lock");
            let same = r
                .get(&id)
                .and_then(|s| s.peer_addr().ok())
                .zip(writer.peer_addr().ok())
                .is_some_and(|(a, b)| a == b);
            if same {
                r.remove(&id);
            }
        }
    });
}

struct Loop {
    agent: Box<dyn Agent>,
    rx: Receiver<Input>,
    tx: Sender<Input>,
    routes: Routes,
    directory: Directory,
    stopping: Arc<AtomicBool>,
    transcript: Arc<Mutex<Vec<TranscriptRecord>>>,
    file: Option<BufWriter<File>>,
    timers: BinaryHeap<Reverse<(Timestamp, u64)>>,
    timer_seq: u64,
    timer_map: HashMap<u64, Timer>,
}

impl Loop {
    fn run(mut self) {
        let mut out = Outbox::new();
        self.agent.on_start(Timestamp::now(), &mut out);
        self.flush(out);
        loop {
            let now = Timestamp::now();
            while let Some(Reverse((at, seq))) = self.timers.peek().copied() {
                if at > now {
                    break;
                }
                self.timers.pop();
                if let Some(t) = self.timer_map.remove(&seq) {
                    let mut out = Outbox::new();
                    self.agent.handle_timer(Timestamp::now(), t, &mut out);
                    self.flush(out);
                }
            }
            let wait = self
                .timers
                .peek()
                .map(|Reverse((at, _))| at.millis_since(Timestamp::now()).clamp(0, 1000) as u64)
                .unwrap_or(1000);
            match self.rx.recv_timeout(Duration::from_millis(wait)) {
                Ok(Input::Message(msg)) => {
                    let now = Timestamp::now();
                    self.directory.learn(&msg);
                    self.record(TranscriptRecord::Message {
                        at: now,
                        agent: self.agent.id().clone(),
                        direction: Direction::Received,
                        message: msg.clone(),
                    });
                    let mut out = Outbox::new();
                    self.agent.handle_message(now, msg, &mut out);
                    self.flush(out);
                }
                Ok(Input::Command(cmd)) => {
                    let mut out = Outbox::new();
                    cmd(self.agent.as_mut(), Timestamp::now(), &mut out);
                    self.flush(out);
                }
                Ok(Input::Stop) | Err(RecvTimeoutError::Disconnected) => break,
                Err(RecvTimeoutError::Timeout) => {}
            }
            if self.stopping.load(Ordering::SeqCst) {
                break;
            }
        }
        if let Some(f) = self.file.as_mut() {
            let _ = f.flush();
        }
        for (_, s) in self.routes.lock().expect("routes lock").drain() {
            let _ = s.shutdown(Shutdown::Both);
        }
        drop(self.tx);
    }

    fn record(&mut self, rec: TranscriptRecord) {
        if let Some(f) = self.file.as_mut() {
            if let Ok(line) = serde_json::to_string(&rec) {
                let _ = writeln!(f, "{line}");
                let _ = f.flush();
            }
        }
        self.transcript.lock().expect("transcript lock").push(rec);
    }

    fn flush(&mut self, out: Outbox) {
        for r in out.records {
            self.record(r);
        }
        for (at, t) in out.timers {
            self.timer_seq += 1;
            self.timers.push(Reverse((at, self.timer_seq)));
            self.timer_map.insert(self.timer_seq, t);
        }
        for msg in out.messages {
            self.record(TranscriptRecord::Message {
                at: Timestamp::now(),
                agent: self.agent.id().clone(),
                direction: Direction::Sent,
                message: msg.clone(),
            });
            if let Err(e) = self.deliver(&msg) {
                tracing::warn!(to = %msg.receiver, "undeliverable {:?}: {e}", msg.performative);
            }
        }
    }

    fn deliver(&mut self, msg: &AclMessage) -> io::Result<()> {
        let frame = encode_message(msg).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
        let existing = self
            .routes
            .lock()
            .expect("routes lock")
            .get(&msg.receiver)
            .and_then(|s| s.try_clone().ok());
        if let Some(mut s) = existing {
            if s.write_all(&frame).is_ok() {
                return Ok(());
            }
            self.routes.lock().expect("routes lock").remove(&msg.receiver);
        }
        let addr = self
            .directory
            .get(&msg.receiver)
            .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, format!("no address for {}", msg.receiver)))?;
        let mut s = TcpStream::connect(&addr)?;
        s.set_nodelay(true)?;
        s.write_all(&frame)?;
        let reader = s.try_clone()?;
        self.routes.lock().expect("routes lock").insert(msg.receiver.clone(), s);
        spawn_reader(reader, self.tx.clone(), self.routes.clone(), self.stopping.clone());
        Ok(())
    }
}
