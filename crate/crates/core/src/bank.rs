//! The banking agent: accounts, a zero-sum double-entry ledger chained by
//! hashes, and the audit store of signed documents behind each entry.

use std::any::Any;
use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{Agent, AgentEvent, Outbox, Timer};
use crate::money::Money;
use crate::protocol::{
    AclMessage, AgentId, Content, EntryKind, LedgerEntry, MessageFactory, Performative, ReceiptContent, RefusalReason,
    Statement,
};
use crate::rfql::RfqRequest;
use crate::signing::{sha256_hex, BalanceQuery, CancellationNotice, DealTerms, KeyRing, SignatureError, SignedDocument};
use crate::time::Timestamp;

/// Account that funds deposits, so that every entry stays double-sided.
pub const TREASURY: &str = "treasury";

const GENESIS_HASH: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("ledger io: {0}")]
    Io(#[from] std::io::Error),
    #[error("ledger line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("amount must be positive, got {0}")]
    NonPositive(Money),
}

/// Agent refusals: a reason code plus detail.
pub type Refusal = (RefusalReason, String);

fn sig_refusal(e: SignatureError) -> Refusal {
    match e {
        SignatureError::UnknownPrincipal(p) => (RefusalReason::UnknownPrincipal, p),
        other => (RefusalReason::BadSignature, other.to_string()),
    }
}

/// Amount charged for a unit: price per core-hour x cores x hours.
pub fn compute_amount(request: &RfqRequest, price: Money) -> Option<Money> {
    let cores = request.cores()? as i128;
    let wall = request.wall_time? as i128;
    Some(Money::from_exact(price.exact() * Ratio::from_integer(cores) * Ratio::new(wall, 3600)))
}

fn entry_hash(entry: &LedgerEntry) -> String {
    let mut unhashed = entry.clone();
    unhashed.hash = String::new();
    sha256_hex(&serde_json::to_vec(&unhashed).expect("entry serializes"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct AuditRecord {
    tx_id: String,
    document: SignedDocument,
}

#[derive(Debug)]
struct Store {
    ledger: File,
    audit: File,
}

fn audit_path(ledger: &Path) -> PathBuf {
    let mut name = ledger.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".audit");
    ledger.with_file_name(name)
}

/// Settlement status of one reservation.
#[derive(Debug, Clone, PartialEq, Eq)]
struct SettlementRef {
    tx_id: String,
    user: String,
    resource: String,
    amount: Money,
    reversed_by: Option<String>,
}

/// Append-only ledger with balances derived by replay.
#[derive(Debug, Default)]
pub struct Ledger {
    entries: Vec<LedgerEntry>,
    balances: BTreeMap<String, Money>,
    settlements: HashMap<String, SettlementRef>,
    audit: HashMap<String, SignedDocument>,
    store: Option<Store>,
}

impl Ledger {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens or creates a persistent ledger, verifying the hash chain.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, LedgerError> {
        let path = path.as_ref();
        let mut ledger = Ledger::default();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let entry: LedgerEntry = serde_json::from_str(&line).map_err(|e| LedgerError::Corrupt {
                    line: i + 1,
                    message: e.to_string(),
                })?;
                if entry.prev_hash != ledger.head_hash() {
                    return Err(LedgerError::Corrupt {
                        line: i + 1,
                        message: "broken hash chain".into(),
                    });
                }
                if entry.hash != entry_hash(&entry) {
                    return Err(LedgerError::Corrupt {
                        line: i + 1,
                        message: "entry hash mismatch".into(),
                    });
                }
                ledger.apply(entry);
            }
        }
        let apath = audit_path(path);
        if apath.exists() {
            let reader = BufReader::new(File::open(&apath)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: AuditRecord = serde_json::from_str(&line).map_err(|e| LedgerError::Corrupt {
                    line: i + 1,
                    message: format!("audit: {e}"),
                })?;
                ledger.audit.insert(rec.tx_id, rec.document);
            }
        }
        let ledger_file = OpenOptions::new().create(true).append(true).open(path)?;
        let audit_file = OpenOptions::new().create(true).append(true).open(apath)?;
        ledger.store = Some(Store {
            ledger: ledger_file,
            audit: audit_file,
        });
        Ok(ledger)
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn balance(&self, account: &str) -> Money {
        self.balances.get(account).copied().unwrap_or(Money::ZERO)
    }

    pub fn balances(&self) -> &BTreeMap<String, Money> {
        &self.balances
    }

    pub fn head_hash(&self) -> String {
        self.entries.last().map_or_else(|| GENESIS_HASH.to_string(), |e| e.hash.clone())
    }

    pub fn audit_document(&self, tx_id: &str) -> Option<&SignedDocument> {
        self.audit.get(tx_id)
    }

    /// Settlement tx id for a reservation and the re-credit that reversed it.
    pub fn settlement_of(&self, reservation_id: &str) -> Option<(String, Option<String>)> {
        self.settlements
            .get(reservation_id)
            .map(|s| (s.tx_id.clone(), s.reversed_by.clone()))
    }

    fn apply(&mut self, entry: LedgerEntry) {
        *self.balances.entry(entry.debit_account.clone()).or_default() -= entry.amount;
        *self.balances.entry(entry.credit_account.clone()).or_default() += entry.amount;
        match entry.kind {
            EntryKind::Settlement => {
                if let Some(rid) = &entry.reservation_id {
                    self.settlements.insert(
                        rid.clone(),
                        SettlementRef {
                            tx_id: entry.tx_id.clone(),
                            user: entry.debit_account.clone(),
                            resource: entry.credit_account.clone(),
                            amount: entry.amount,
                            reversed_by: None,
                        },
                    );
                }
            }
            EntryKind::ReCredit => {
                if let Some(s) = entry.reservation_id.as_ref().and_then(|r| self.settlements.get_mut(r)) {
                    s.reversed_by = Some(entry.tx_id.clone());
                }
            }
            EntryKind::Deposit => {}
        }
        self.entries.push(entry);
    }

    #[allow(clippy::too_many_arguments)]
    fn append(
        &mut self,
        now: Timestamp,
        kind: EntryKind,
        debit: &str,
        credit: &str,
        amount: Money,
        reservation_id: Option<String>,
        document: Option<SignedDocument>,
        reverses: Option<String>,
    ) -> Result<LedgerEntry, LedgerError> {
        if !amount.is_positive() {
            return Err(LedgerError::NonPositive(amount));
        }
        let seq = self.entries.len() as u64 + 1;
        let mut entry = LedgerEntry {
            seq,
            tx_id: format!("tx-{seq:06}"),
            kind,
            debit_account: debit.to_string(),
            credit_account: credit.to_string(),
            amount,
            reservation_id,
            rfq_digest: document.as_ref().map(SignedDocument::digest),
            reverses,
            timestamp: now,
            prev_hash: self.head_hash(),
            hash: String::new(),
        };
        entry.hash = entry_hash(&entry);
        if let Some(store) = &mut self.store {
            if let Some(doc) = &document {
                let rec = AuditRecord {
                    tx_id: entry.tx_id.clone(),
                    document: doc.clone(),
                };
                writeln!(store.audit, "{}", serde_json::to_string(&rec).expect("audit serializes"))?;
                store.audit.flush()?;
            }
            writeln!(store.ledger, "{}", serde_json::to_string(&entry).expect("entry serializes"))?;
            store.ledger.flush()?;
        }
        if let Some(doc) = document {
            self.audit.insert(entry.tx_id.clone(), doc);
        }
        self.apply(entry.clone());
        Ok(entry)
    }

    /// Checks the chain, the per-entry hashes and zero-sum over every prefix.
    pub fn verify(&self) -> Result<(), String> {
        let mut prev = GENESIS_HASH.to_string();
        let mut replay: BTreeMap<&str, Money> = BTreeMap::new();
        for e in &self.entries {
            if e.prev_hash != prev {
                return Err(format!("{}: broken chain", e.tx_id));
            }
            if e.hash != entry_hash(e) {
                return Err(format!("{}: hash mismatch", e.tx_id));
            }
            if !e.amount.is_positive() {
                return Err(format!("{}: non-positive amount", e.tx_id));
            }
            *replay.entry(&e.debit_account).or_default() -= e.amount;
            *replay.entry(&e.credit_account).or_default() += e.amount;
            if replay.values().copied().sum::<Money>() != Money::ZERO {
                return Err(format!("{}: prefix is not zero-sum", e.tx_id));
            }
            prev = e.hash.clone();
        }
        for (account, balance) in &self.balances {
            if replay.get(account.as_str()).copied().unwrap_or(Money::ZERO) != *balance {
                return Err(format!("{account}: balance differs from replay"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankParams {
    pub bank_id: AgentId,
    /// How many recent entries a statement carries when the query does not say.
    #[serde(default = "default_statement_entries")]
    pub statement_entries: usize,
}

fn default_statement_entries() -> usize {
    10
}

impl BankParams {
    pub fn new(bank_id: impl Into<AgentId>) -> Self {
        BankParams {
            bank_id: bank_id.into(),
            statement_entries: default_statement_entries(),
        }
    }
}

pub struct BankAgent {
    params: BankParams,
    ledger: Ledger,
    keys: KeyRing,
    msgs: MessageFactory,
}

impl BankAgent {
    pub fn new(params: BankParams, ledger: Ledger, keys: KeyRing) -> Self {
        let msgs = MessageFactory::new(params.bank_id.clone());
        BankAgent {
            params,
            ledger,
            keys,
            msgs,
        }
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn keys(&self) -> &KeyRing {
        &self.keys
    }

    pub fn register_key(&mut self, principal: &str, key: Vec<u8>) -> Result<(), SignatureError> {
        self.keys.register(principal, key)?;
        self.ledger.balances.entry(principal.to_string()).or_default();
        Ok(())
    }

    /// Administrator deposit from the treasury.
    pub fn credit(&mut self, now: Timestamp, principal: &str, amount: Money) -> Result<LedgerEntry, LedgerError> {
        self.ledger
            .append(now, EntryKind::Deposit, TREASURY, principal, amount, None, None, None)
    }

    /// Records a doubly-signed deal. Returns the settlement receipt.
    pub fn handle_transaction_update(&mut self, now: Timestamp, doc: &SignedDocument) -> Result<ReceiptContent, Refusal> {
        let terms: DealTerms = doc.decode("deal terms").map_err(|e| (RefusalReason::MalformedContent, e.to_string()))?;
        self.keys
            .verify_chain(doc, &[&terms.user_id, &terms.resource_id])
            .map_err(sig_refusal)?;
        if let Some(existing) = self.ledger.settlements.get(&terms.reservation_id) {
            return Ok(ReceiptContent {
                tx_id: existing.tx_id.clone(),
                kind: EntryKind::Settlement,
                reservation_id: terms.reservation_id,
                amount: existing.amount,
            });
        }
        let amount = compute_amount(&terms.request, terms.price)
            .filter(|a| a.is_positive())
            .ok_or_else(|| (RefusalReason::MalformedContent, "request lacks cores or wall time".to_string()))?;
        if self.ledger.balance(&terms.user_id) < amount {
            tracing::warn!(user = %terms.user_id, %amount, "settlement overdraws account");
        }
        let entry = self
            .ledger
            .append(
                now,
                EntryKind::Settlement,
                &terms.user_id,
                &terms.resource_id,
                amount,
                Some(terms.reservation_id.clone()),
                Some(doc.clone()),
                None,
            )
            .map_err(|e| (RefusalReason::Unexpected, e.to_string()))?;
        Ok(ReceiptContent {
            tx_id: entry.tx_id,
            kind: EntryKind::Settlement,
            reservation_id: terms.reservation_id,
            amount,
        })
    }

    /// Reverses a settlement on the resource's signed notice. Returns the
    /// receipt and the user to notify.
    pub fn handle_cancellation(&mut self, now: Timestamp, doc: &SignedDocument) -> Result<(ReceiptContent, String), Refusal> {
        let notice: CancellationNotice = doc
            .decode("cancellation notice")
            .map_err(|e| (RefusalReason::MalformedContent, e.to_string()))?;
        self.keys
            .verify_chain(doc, &[&notice.resource_id])
            .map_err(sig_refusal)?;
        let Some(settled) = self.ledger.settlements.get(&notice.reservation_id).cloned() else {
            return Err((RefusalReason::NotSettled, notice.reservation_id));
        };
        if settled.resource != notice.resource_id || settled.user != notice.user_id {
            return Err((RefusalReason::NotOwner, notice.reservation_id));
        }
        if settled.reversed_by.is_some() {
            return Err((RefusalReason::AlreadyCancelled, notice.reservation_id));
        }
        let entry = self
            .ledger
            .append(
                now,
                EntryKind::ReCredit,
                &settled.resource,
                &settled.user,
                settled.amount,
                Some(notice.reservation_id.clone()),
                Some(doc.clone()),
                Some(settled.tx_id.clone()),
            )
            .map_err(|e| (RefusalReason::Unexpected, e.to_string()))?;
        Ok((
            ReceiptContent {
                tx_id: entry.tx_id,
                kind: EntryKind::ReCredit,
                reservation_id: notice.reservation_id,
                amount: settled.amount,
            },
            settled.user,
        ))
    }

    /// Statement for a signed balance query.
    pub fn handle_balance_request(&self, doc: &SignedDocument) -> Result<Statement, Refusal> {
        let query: BalanceQuery = doc
            .decode("balance query")
            .map_err(|e| (RefusalReason::MalformedContent, e.to_string()))?;
        self.keys
            .verify_chain(doc, &[&query.principal])
            .map_err(sig_refusal)?;
        let k = if query.entries == 0 { self.params.statement_entries } else { query.entries };
        Ok(self.statement(&query.principal, k))
    }

    /// Unauthenticated statement for in-process administration.
    pub fn statement(&self, principal: &str, last: usize) -> Statement {
        let touching: Vec<&LedgerEntry> = self
            .ledger
            .entries
            .iter()
            .filter(|e| e.debit_account == principal || e.credit_account == principal)
            .collect();
        let skip = touching.len().saturating_sub(last);
        Statement {
            principal: principal.to_string(),
            balance: self.ledger.balance(principal),
            entries: touching.into_iter().skip(skip).cloned().collect(),
        }
    }

    /// Every settlement and re-credit has a verifying document on file.
    pub fn audit_consistent(&self) -> Result<(), String> {
        for e in &self.ledger.entries {
            let signers: Vec<&str> = match e.kind {
                EntryKind::Deposit => continue,
                EntryKind::Settlement => vec![&e.debit_account, &e.credit_account],
                EntryKind::ReCredit => vec![&e.debit_account],
            };
            let doc = self
                .ledger
                .audit
                .get(&e.tx_id)
                .ok_or_else(|| format!("{}: no audit document", e.tx_id))?;
            self.keys
                .verify_chain(doc, &signers)
                .map_err(|err| format!("{}: {err}", e.tx_id))?;
            if e.rfq_digest.as_deref() != Some(doc.digest().as_str()) {
                return Err(format!("{}: digest mismatch", e.tx_id));
            }
        }
        Ok(())
    }

    fn log_appended(&self, now: Timestamp, out: &mut Outbox) {
        if let Some(entry) = self.ledger.entries.last() {
            out.event(now, &self.params.bank_id, AgentEvent::LedgerAppended { entry: entry.clone() });
        }
    }
}

impl Agent for BankAgent {
    fn id(&self) -> &AgentId {
        &self.params.bank_id
    }

    fn handle_message(&mut self, now: Timestamp, msg: AclMessage, out: &mut Outbox) {
        if msg.performative != Performative::Request {
            return;
        }
        let before = self.ledger.entries.len();
        let reply = match &msg.content {
            Content::BankUpdate(c) => match self.handle_transaction_update(now, &c.signed_document) {
                Ok(receipt) => self.msgs.reply(&msg, Performative::Agree, now, Content::Receipt(receipt)),
                Err((reason, detail)) => self.msgs.refuse(&msg, now, reason, detail),
            },
            Content::BankCancel(c) => match self.handle_cancellation(now, &c.signed_document) {
                Ok((receipt, user)) => {
                    let notice = self.msgs.build(
                        Performative::Agree,
                        &AgentId(user),
                        &msg.conversation_id,
                        Some(&msg.message_id),
                        now,
                        Content::Receipt(receipt.clone()),
                    );
                    out.send(notice);
                    self.msgs.reply(&msg, Performative::Agree, now, Content::Receipt(receipt))
                }
                Err((reason, detail)) => self.msgs.refuse(&msg, now, reason, detail),
            },
            Content::BalanceQuery(c) => match self.handle_balance_request(&c.signed_document) {
                Ok(statement) => self.msgs.reply(&msg, Performative::Agree, now, Content::Balance { statement }),
                Err((reason, detail)) => self.msgs.refuse(&msg, now, reason, detail),
            },
            _ => self.msgs.refuse(&msg, now, RefusalReason::MalformedContent, "unsupported request"),
        };
        if self.ledger.entries.len() > before {
            self.log_appended(now, out);
        }
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
