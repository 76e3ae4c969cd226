use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{RfqDocument, RfqRequest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    RequiredTermAbsent,
    MutuallyExclusive,
    OutOfRange,
    /// The deadline is not after the earliest start.
    DeadlineNotAfterStart,
    /// The start/deadline window cannot hold the wall time.
    WindowTooShort,
    DuplicateRequestId,
    EmptyDocument,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViolationKind::RequiredTermAbsent => "required term absent",
            ViolationKind::MutuallyExclusive => "mutually exclusive",
            ViolationKind::OutOfRange => "value out of range",
            ViolationKind::DeadlineNotAfterStart => "deadline not after earliest start",
            ViolationKind::WindowTooShort => "window shorter than wall time",
            ViolationKind::DuplicateRequestId => "duplicate request id",
            ViolationKind::EmptyDocument => "document has no requests",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    /// Id of the offending request, empty for document-level violations.
    pub request_id: String,
    /// Offending term (or terms, joined with `/`).
    pub term: String,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.request_id.is_empty() {
            write!(f, "{}: {}", self.term, self.kind)
        } else {
            write!(f, "request {:?}: {}: {}", self.request_id, self.term, self.kind)
        }
    }
}

/// Checks every request invariant; an empty list means the document is valid.
pub fn validate_rfq(doc: &RfqDocument) -> Vec<Violation> {
    let mut out = Vec::new();
    if doc.requests.is_empty() {
        out.push(Violation {
            request_id: String::new(),
            term: "Request".into(),
            kind: ViolationKind::EmptyDocument,
        });
    }
    let mut seen = HashSet::new();
    for req in &doc.requests {
        if !seen.insert(req.id.as_str()) {
            out.push(Violation {
                request_id: req.id.clone(),
                term: "id".into(),
                kind: ViolationKind::DuplicateRequestId,
            });
        }
        validate_request(req, &mut out);
    }
    out
}

pub(crate) fn validate_request(req: &RfqRequest, out: &mut Vec<Violation>) {
    let mut push = |term: &str, kind| {
        out.push(Violation {
            request_id: req.id.clone(),
            term: term.to_string(),
            kind,
        })
    };

    match req.cpu_hour_cost {
        None => push("CPUHourCost", ViolationKind::RequiredTermAbsent),
        Some(p) if !p.is_positive() => push("CPUHourCost", ViolationKind::OutOfRange),
        _ => {}
    }
    if req.end_date.is_none() {
        push("EndDate", ViolationKind::RequiredTermAbsent);
    }
    if req.end_time.is_none() {
        push("EndTime", ViolationKind::RequiredTermAbsent);
    }
    match req.wall_time {
        None => push("WallTime", ViolationKind::RequiredTermAbsent),
        Some(0) => push("WallTime", ViolationKind::OutOfRange),
        _ => {}
    }
    // StartDate and StartTime only make sense together.
    match (req.start_date.is_some(), req.start_time.is_some()) {
        (true, false) => push("StartTime", ViolationKind::RequiredTermAbsent),
        (false, true) => push("StartDate", ViolationKind::RequiredTermAbsent),
        _ => {}
    }

    let node_form = req.node_count.is_some() || req.node_cores.is_some();
    match (req.total_cores, node_form) {
        (Some(_), true) => push("TotalCores/NodeCount/NodeCores", ViolationKind::MutuallyExclusive),
        (None, false) => push("TotalCores", ViolationKind::RequiredTermAbsent),
        (None, true) => {
            if req.node_count.is_none() {
                push("NodeCount", ViolationKind::RequiredTermAbsent);
            }
            if req.node_cores.is_none() {
                push("NodeCores", ViolationKind::RequiredTermAbsent);
            }
        }
        (Some(_), false) => {}
    }
    for (term, v) in [
        ("TotalCores", req.total_cores),
        ("NodeCount", req.node_count),
        ("NodeCores", req.node_cores),
    ] {
        if v == Some(0) {
            push(term, ViolationKind::OutOfRange);
        }
    }

    if req.total_disk_space.is_some() && req.node_disk_space.is_some() {
        push("TotalDiskSpace/NodeDiskSpace", ViolationKind::MutuallyExclusive);
    }
    if let Some(speed) = req.cpu_speed {
        if !(speed.is_finite() && speed > 0.0) {
            push("CPUSpeed", ViolationKind::OutOfRange);
        }
    }

    if let (Some(start), Some(deadline)) = (req.earliest_start(), req.deadline()) {
        if deadline <= start {
            push("EndDate/EndTime", ViolationKind::DeadlineNotAfterStart);
        } else if let Some(wall) = req.wall_time_millis() {
            if deadline.millis_since(start) < wall {
                push("WallTime", ViolationKind::WindowTooShort);
            }
        }
    }
}
