//! JSON-over-HTTP operations API in front of one user agent.
//!
//! Every state-changing request becomes a command on the user agent's own
//! event loop; reads take a snapshot the same way. Answers that need a round
//! trip to another agent (balances, the registry view) are polled for until
//! they arrive or the poll timeout passes.

use std::any::Any;
use std::io;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tiny_http::{Header, Method, Request, Response, Server};

use crate::agent::Outbox;
use crate::money::Money;
use crate::protocol::{AgentId, Offer, RegistryEntry, Statement};
use crate::rfql::{parse_rfq, RfqRequest};
use crate::runtime::Node;
use crate::time::Timestamp;
use crate::user::{
    Agreement, ApprovalMode, ApprovalState, AuctionConfig, AuctionState, Decision, Phase, Purchase, RoundSummary,
    UserAgent, UserError,
};

type UserCommand = Box<dyn FnOnce(&mut UserAgent, Timestamp, &mut Outbox) -> Box<dyn Any + Send> + Send>;

/// Access to a running user agent.
pub trait UserHandle: Send + Sync + 'static {
    /// Runs `f` on the agent's event loop. `None` when the agent is gone.
    fn run(&self, f: UserCommand) -> Option<Box<dyn Any + Send>>;
}

impl UserHandle for Node {
    fn run(&self, f: UserCommand) -> Option<Box<dyn Any + Send>> {
        self.call::<UserAgent, _>(f)
    }
}

fn call<R: Send + 'static>(
    handle: &dyn UserHandle,
    f: impl FnOnce(&mut UserAgent, Timestamp, &mut Outbox) -> R + Send + 'static,
) -> Option<R> {
    let boxed: UserCommand = Box::new(move |u, now, out| Box::new(f(u, now, out)));
    handle.run(boxed)?.downcast::<R>().ok().map(|b| *b)
}

#[derive(Debug, Clone)]
pub struct OpsOptions {
    /// Resources to invite when a new auction names none and the user has no registry.
    pub resources: Vec<AgentId>,
    pub poll_timeout: Duration,
    pub poll_interval: Duration,
    /// Ledger entries returned with an account statement.
    pub statement_entries: usize,
}

impl Default for OpsOptions {
    fn default() -> Self {
        OpsOptions {
            resources: Vec::new(),
            poll_timeout: Duration::from_secs(5),
            poll_interval: Duration::from_millis(20),
            statement_entries: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuctionSummary {
    pub auction_id: String,
    pub phase: Phase,
    pub round: u32,
    pub rounds: u32,
    pub units: usize,
    pub approval: ApprovalMode,
    /// Units waiting for an operator decision.
    pub awaiting_approval: Vec<usize>,
    pub started_at: Timestamp,
    pub finished_at: Option<Timestamp>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitView {
    pub index: usize,
    pub request_id: String,
    pub original_price: Option<Money>,
    pub current_price: Option<Money>,
    pub rounds: Vec<RoundSummary>,
    pub ranked: Vec<Offer>,
    pub best_offers: Vec<Offer>,
    pub approval: ApprovalState,
    pub agreed: Option<Agreement>,
    pub confirmed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuctionDetail {
    #[serde(flatten)]
    pub summary: AuctionSummary,
    pub resources: Vec<AgentId>,
    pub units: Vec<UnitView>,
}

/// One resource as the user currently sees the market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceView {
    pub resource_id: AgentId,
    /// `"registry"` when the entry came from the registry, `"static"` otherwise.
    pub source: String,
    pub address: Option<String>,
    pub alive: Option<bool>,
    pub last_heartbeat: Option<Timestamp>,
    pub attractiveness: Option<Money>,
}

impl From<RegistryEntry> for ResourceView {
    fn from(e: RegistryEntry) -> Self {
        ResourceView {
            resource_id: e.resource_id,
            source: "registry".into(),
            address: Some(e.address),
            alive: Some(e.alive),
            last_heartbeat: Some(e.last_heartbeat),
            attractiveness: e.attractiveness,
        }
    }
}

/// Body of `POST /auctions`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NewAuction {
    /// Request document as RFQL XML.
    pub rfql: String,
    pub config: AuctionConfig,
    #[serde(default)]
    pub resources: Option<Vec<AgentId>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApprovalBody {
    pub decision: Decision,
}

fn summarize(a: &AuctionState) -> AuctionSummary {
    AuctionSummary {
        auction_id: a.auction_id.clone(),
        phase: a.phase,
        round: a.round,
        rounds: a.config.rounds,
        units: a.units.len(),
        approval: a.config.approval,
        awaiting_approval: a
            .units
            .iter()
            .filter(|u| matches!(u.approval, ApprovalState::Pending { .. }))
            .map(|u| u.index)
            .collect(),
        started_at: a.started_at,
        finished_at: a.finished_at,
        failure: a.failure.clone(),
    }
}

fn detail(a: &AuctionState) -> AuctionDetail {
    AuctionDetail {
        summary: summarize(a),
        resources: a.resources.clone(),
        units: a
            .units
            .iter()
            .map(|u| UnitView {
                index: u.index,
                request_id: u.original.id.clone(),
                original_price: u.original.cpu_hour_cost,
                current_price: u.current.cpu_hour_cost,
                rounds: u.rounds.clone(),
                ranked: u.ranked.clone(),
                best_offers: u.best_offers.clone(),
                approval: u.approval.clone(),
                agreed: u.agreed.clone(),
                confirmed: u.confirmed,
            })
            .collect(),
    }
}

struct Reply {
    status: u16,
    body: Value,
}

impl Reply {
    fn ok(body: impl Serialize) -> Self {
        Self::with(200, body)
    }

    fn with(status: u16, body: impl Serialize) -> Self {
        Reply {
            status,
            body: serde_json::to_value(body).unwrap_or(Value::Null),
        }
    }

    fn error(status: u16, message: impl Into<String>) -> Self {
        Reply {
            status,
            body: json!({ "error": message.into() }),
        }
    }

    fn gone() -> Self {
        Self::error(503, "user agent is not running")
    }
}

fn user_error(e: UserError) -> Reply {
    let status = match &e {
        UserError::UnknownAuction(_) | UserError::UnknownUnit(_) | UserError::UnknownReservation(_) => 404,
        UserError::AuctionClosed
        | UserError::ApprovalNotEnabled(_)
        | UserError::NotPending(_)
        | UserError::NotCancellable(_) => 409,
        UserError::InvalidDocument(_) | UserError::BadConfig(_) | UserError::NoResources | UserError::NoRegistry => 400,
    };
    let mut reply = Reply::error(status, e.to_string());
    if let UserError::InvalidDocument(v) = e {
        reply.body["violations"] = serde_json::to_value(v).unwrap_or(Value::Null);
    }
    reply
}

struct Api {
    user: Arc<dyn UserHandle>,
    user_id: AgentId,
    opts: OpsOptions,
}

impl Api {
    fn route(&self, method: &Method, path: &str, body: &str) -> Reply {
        let parts: Vec<&str> = path.trim_matches('/').split('/').filter(|p| !p.is_empty()).collect();
        match (method, parts.as_slice()) {
            (Method::Get, ["auctions"]) => self.list_auctions(),
            (Method::Post, ["auctions"]) => self.create_auction(body),
            (Method::Get, ["auctions", id]) => self.get_auction(id),
            (Method::Post, ["auctions", id, "units", unit, "approve"]) => self.approve(id, unit, body),
            (Method::Get, ["reservations"]) => self.reservations(),
            (Method::Post, ["reservations", id, "cancel"]) => self.cancel(id),
            (Method::Get, ["accounts", id]) => self.account(id),
            (Method::Get, ["resources"]) => self.resources(),
            (_, ["auctions"] | ["auctions", _] | ["auctions", _, "units", _, "approve"])
            | (_, ["reservations"] | ["reservations", _, "cancel"] | ["accounts", _] | ["resources"]) => {
                Reply::error(405, "method not allowed")
            }
            _ => Reply::error(404, format!("no route for {path}")),
        }
    }

    fn list_auctions(&self) -> Reply {
        match call(&*self.user, |u, _, _| u.auctions().map(summarize).collect::<Vec<_>>()) {
            Some(list) => Reply::ok(list),
            None => Reply::gone(),
        }
    }

    fn get_auction(&self, id: &str) -> Reply {
        let id = id.to_string();
        match call(&*self.user, move |u, _, _| u.auction(&id).map(detail)) {
            Some(Some(d)) => Reply::ok(d),
            Some(None) => Reply::error(404, "unknown auction"),
            None => Reply::gone(),
        }
    }

    fn create_auction(&self, body: &str) -> Reply {
        let req: NewAuction = match serde_json::from_str(body) {
            Ok(r) => r,
            Err(e) => return Reply::error(400, format!("bad request body: {e}")),
        };
        let doc = match parse_rfq(&req.rfql) {
            Ok(d) => d,
            Err(e) => return Reply::error(400, format!("bad RFQL: {e}")),
        };
        let resources = req.resources.unwrap_or_else(|| self.opts.resources.clone());
        let config = req.config;
        let result = call(&*self.user, move |u, now, out| u.start_auction(now, doc, config, resources, out));
        match result {
            Some(Ok(auction_id)) => Reply::with(201, json!({ "auction_id": auction_id })),
            Some(Err(e)) => user_error(e),
            None => Reply::gone(),
        }
    }

    fn approve(&self, id: &str, unit: &str, body: &str) -> Reply {
        let Ok(unit) = unit.parse::<usize>() else {
            return Reply::error(404, "unknown unit");
        };
        let decision = match serde_json::from_str::<ApprovalBody>(body) {
            Ok(b) => b.decision,
            Err(e) => return Reply::error(400, format!("bad request body: {e}")),
        };
        let id = id.to_string();
        let result = call(&*self.user, move |u, now, out| {
            u.approve_best_offer(now, &id, unit, decision, out)?;
            Ok(u.auction(&id).map(summarize))
        });
        match result {
            Some(Ok(summary)) => Reply::ok(summary),
            Some(Err(e)) => user_error(e),
            None => Reply::gone(),
        }
    }

    fn reservations(&self) -> Reply {
        match call(&*self.user, |u, _, _| u.purchases().cloned().collect::<Vec<Purchase>>()) {
            Some(list) => Reply::ok(list),
            None => Reply::gone(),
        }
    }

    fn cancel(&self, id: &str) -> Reply {
        let id = id.to_string();
        let result = call(&*self.user, move |u, now, out| {
            u.cancel_purchase(now, &id, out)?;
            Ok(u.purchases().find(|p| p.reservation_id == id).cloned())
        });
        match result {
            Some(Ok(p)) => Reply::with(202, p),
            Some(Err(e)) => user_error(e),
            None => Reply::gone(),
        }
    }

    /// Polls `read` on the agent until it yields a value.
    fn poll<R: Send + 'static>(&self, read: fn(&UserAgent) -> Option<R>) -> Result<R, Reply> {
        let until = Instant::now() + self.opts.poll_timeout;
        loop {
            match call(&*self.user, move |u, _, _| read(u)) {
                None => return Err(Reply::gone()),
                Some(Some(v)) => return Ok(v),
                Some(None) if Instant::now() >= until => return Err(Reply::error(504, "no answer in time")),
                Some(None) => thread::sleep(self.opts.poll_interval),
            }
        }
    }

    fn account(&self, id: &str) -> Reply {
        // Only the operator's own account is visible through this API.
        if id != self.user_id.as_str() {
            return Reply::error(404, "unknown account");
        }
        let entries = self.opts.statement_entries;
        if call(&*self.user, move |u, now, out| u.request_balance(now, entries, out)).is_none() {
            return Reply::gone();
        }
        match self.poll::<Statement>(|u| u.statement().cloned()) {
            Ok(s) => Reply::ok(s),
            Err(r) => r,
        }
    }

    fn resources(&self) -> Reply {
        let fallback = self.opts.resources.clone();
        match call(&*self.user, |u, now, out| u.refresh_market(now, out)) {
            None => Reply::gone(),
            Some(Err(UserError::NoRegistry)) => Reply::ok(
                fallback
                    .into_iter()
                    .map(|r| ResourceView {
                        resource_id: r,
                        source: "static".into(),
                        address: None,
                        alive: None,
                        last_heartbeat: None,
                        attractiveness: None,
                    })
                    .collect::<Vec<_>>(),
            ),
            Some(Err(e)) => user_error(e),
            Some(Ok(())) => match self.poll(|u| u.market().map(|m| m.entries.clone())) {
                Ok(entries) => Reply::ok(entries.into_iter().map(ResourceView::from).collect::<Vec<_>>()),
                Err(r) => r,
            },
        }
    }
}

fn header(name: &str, value: &str) -> Header {
    Header::from_bytes(name.as_bytes(), value.as_bytes()).expect("static header")
}

fn respond(request: Request, reply: Reply) {
    let text = serde_json::to_string(&reply.body).unwrap_or_else(|_| "null".into());
    let response = Response::from_string(text)
        .with_status_code(reply.status)
        .with_header(header("Content-Type", "application/json"))
        .with_header(header("Access-Control-Allow-Origin", "*"));
    if let Err(e) = request.respond(response) {
        tracing::debug!("client went away: {e}");
    }
}

fn handle(api: &Api, mut request: Request) {
    if *request.method() == Method::Options {
        let response = Response::empty(204)
            .with_header(header("Access-Control-Allow-Origin", "*"))
            .with_header(header("Access-Control-Allow-Methods", "GET, POST, OPTIONS"))
            .with_header(header("Access-Control-Allow-Headers", "Content-Type"));
        let _ = request.respond(response);
        return;
    }
    let mut body = String::new();
    if let Err(e) = request.as_reader().read_to_string(&mut body) {
        respond(request, Reply::error(400, format!("reading body: {e}")));
        return;
    }
    let path = request.url().split('?').next().unwrap_or("").to_string();
    let method = request.method().clone();
    let reply = api.route(&method, &path, &body);
    respond(request, reply);
}

/// A running operations API.
pub struct OpsServer {
    addr: SocketAddr,
    server: Arc<Server>,
    thread: Option<JoinHandle<()>>,
}

impl OpsServer {
    /// Serves the API for `user_id` on `listen`, one thread per request.
    pub fn start(user: Arc<dyn UserHandle>, user_id: AgentId, listen: &str, opts: OpsOptions) -> io::Result<Self> {
        let server = Arc::new(Server::http(listen).map_err(io::Error::other)?);
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| io::Error::other("ops API must listen on an IP address"))?;
        let api = Arc::new(Api { user, user_id, opts });
        let srv = server.clone();
        let thread = thread::Builder::new().name("ops-api".into()).spawn(move || {
            for request in srv.incoming_requests() {
                let api = api.clone();
                let _ = thread::Builder::new().name("ops-request".into()).spawn(move || handle(&api, request));
            }
        })?;
        Ok(OpsServer {
            addr,
            server,
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for OpsServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Convenience for building the `rfql` field of [`NewAuction`].
pub fn new_auction_body(requests: &[RfqRequest], document_id: &str, config: &AuctionConfig) -> Value {
    let doc = crate::rfql::RfqDocument::new(document_id, requests.to_vec());
    json!({
        "rfql": crate::rfql::serialize_rfq(&doc),
        "config": config,
    })
}
