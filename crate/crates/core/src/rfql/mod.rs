//! Request-for-Quotation documents.
//!
//! An RFQL document carries one or more [`RfqRequest`]s; each request is one
//! unit of a combinatorial auction. Terms are named exactly as the XML
//! elements (`CPUHourCost`, `TotalCores`, ...). Units: CPUSpeed in GHz, disk
//! and RAM in MB, bandwidth in Mbit/s, WallTime in seconds, dates and times
//! in UTC.

mod matching;
mod validate;
mod xml;

use chrono::{NaiveDate, NaiveTime};
use serde::{Deserialize, Serialize};

use crate::money::Money;
use crate::time::Timestamp;

pub use matching::{match_static, ResourceProfile};
pub use validate::{validate_rfq, Violation, ViolationKind};
pub use xml::{parse_rfq, serialize_rfq, RfqError};

/// The published schema for RFQL documents.
pub const RFQL_SCHEMA: &str = include_str!("../../schema/rfql.xsd");

/// Term names in schema order.
pub const TERMS: [&str; 17] = [
    "CPUHourCost",
    "EndDate",
    "EndTime",
    "StartDate",
    "StartTime",
    "OperatingSystem",
    "OSVersion",
    "Architecture",
    "CPUSpeed",
    "WallTime",
    "TotalDiskSpace",
    "NodeDiskSpace",
    "InterNodeBandwidth",
    "RAMPerCore",
    "TotalCores",
    "NodeCount",
    "NodeCores",
];

/// One unit of a request for quotation. Every term is optional at the type
/// level so that invalid documents can be represented and reported by
/// [`validate_rfq`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RfqRequest {
    pub id: String,
    #[serde(rename = "CPUHourCost", default, skip_serializing_if = "Option::is_none")]
    pub cpu_hour_cost: Option<Money>,
    #[serde(rename = "EndDate", default, skip_serializing_if = "Option::is_none")]
    pub end_date: Option<NaiveDate>,
    #[serde(rename = "EndTime", default, skip_serializing_if = "Option::is_none")]
    pub end_time: Option<NaiveTime>,
    #[serde(rename = "StartDate", default, skip_serializing_if = "Option::is_none")]
    pub start_date: Option<NaiveDate>,
    #[serde(rename = "StartTime", default, skip_serializing_if = "Option::is_none")]
    pub start_time: Option<NaiveTime>,
    #[serde(rename = "OperatingSystem", default, skip_serializing_if = "Option::is_none")]
    pub operating_system: Option<String>,
    #[serde(rename = "OSVersion", default, skip_serializing_if = "Option::is_none")]
    pub os_version: Option<String>,
    #[serde(rename = "Architecture", default, skip_serializing_if = "Option::is_none")]
    pub architecture: Option<String>,
    #[serde(rename = "CPUSpeed", default, skip_serializing_if = "Option::is_none")]
    pub cpu_speed: Option<f64>,
    #[serde(rename = "WallTime", default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<u64>,
    #[serde(rename = "TotalDiskSpace", default, skip_serializing_if = "Option::is_none")]
    pub total_disk_space: Option<u64>,
    #[serde(rename = "NodeDiskSpace", default, skip_serializing_if = "Option::is_none")]
    pub node_disk_space: Option<u64>,
    #[serde(rename = "InterNodeBandwidth", default, skip_serializing_if = "Option::is_none")]
    pub inter_node_bandwidth: Option<u64>,
    #[serde(rename = "RAMPerCore", default, skip_serializing_if = "Option::is_none")]
    pub ram_per_core: Option<u64>,
    #[serde(rename = "TotalCores", default, skip_serializing_if = "Option::is_none")]
    pub total_cores: Option<u32>,
    #[serde(rename = "NodeCount", default, skip_serializing_if = "Option::is_none")]
    pub node_count: Option<u32>,
    #[serde(rename = "NodeCores", default, skip_serializing_if = "Option::is_none")]
    pub node_cores: Option<u32>,
}

impl RfqRequest {
    /// Minimal valid request: price, total cores, wall time and deadline.
    pub fn new(id: impl Into<String>, price: Money, cores: u32, wall_time: u64, deadline: Timestamp) -> Self {
        let (end_date, end_time) = deadline.to_date_time();
        RfqRequest {
            id: id.into(),
            cpu_hour_cost: Some(price),
            end_date: Some(end_date),
            end_time: Some(end_time),
            wall_time: Some(wall_time),
            total_cores: Some(cores),
            ..RfqRequest::default()
        }
    }

    pub fn with_earliest_start(mut self, start: Timestamp) -> Self {
        let (d, t) = start.to_date_time();
        self.start_date = Some(d);
        self.start_time = Some(t);
        self
    }

    /// Total cores requested, from either `TotalCores` or `NodeCount` x `NodeCores`.
    pub fn cores(&self) -> Option<u64> {
        match (self.total_cores, self.node_count, self.node_cores) {
            (Some(t), _, _) => Some(t as u64),
            (None, Some(n), Some(c)) => Some(n as u64 * c as u64),
            _ => None,
        }
    }

    pub fn deadline(&self) -> Option<Timestamp> {
        Some(Timestamp::from_date_time(self.end_date?, self.end_time?))
    }

    /// Explicit earliest start; `None` means "now" at evaluation time.
    pub fn earliest_start(&self) -> Option<Timestamp> {
        Some(Timestamp::from_date_time(self.start_date?, self.start_time?))
    }

    pub fn wall_time_millis(&self) -> Option<i64> {
        self.wall_time.map(|w| w as i64 * 1000)
    }

    /// Invariant violations of this request on its own.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        validate::validate_request(self, &mut out);
        out
    }

    pub fn set_deadline(&mut self, deadline: Timestamp) {
        let (d, t) = deadline.to_date_time();
        self.end_date = Some(d);
        self.end_time = Some(t);
    }
}

/// A request-for-quotation document: an ordered, non-empty list of units.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RfqDocument {
    pub document_id: String,
    pub requests: Vec<RfqRequest>,
}

impl RfqDocument {
    pub fn new(document_id: impl Into<String>, requests: Vec<RfqRequest>) -> Self {
        RfqDocument {
            document_id: document_id.into(),
            requests,
        }
    }

    pub fn single(document_id: impl Into<String>, request: RfqRequest) -> Self {
        Self::new(document_id, vec![request])
    }
}
