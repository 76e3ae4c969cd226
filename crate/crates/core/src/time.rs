//! Wall-clock and virtual timestamps.
//!
//! Every agent reads time through the `now` argument of its handlers, so the
//! same code runs against the discrete-event simulator and the system clock.

use std::fmt;
use std::ops::{Add, Sub};

use chrono::{DateTime, NaiveDate, NaiveDateTime, NaiveTime, Utc};
use serde::{Deserialize, Serialize};

/// Milliseconds since the Unix epoch (UTC).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub const EPOCH: Timestamp = Timestamp(0);

    pub fn now() -> Self {
        Timestamp(Utc::now().timestamp_millis())
    }

    pub const fn from_secs(secs: i64) -> Self {
        Timestamp(secs * 1000)
    }

    pub const fn from_millis(ms: i64) -> Self {
        Timestamp(ms)
    }

    pub const fn as_millis(self) -> i64 {
        self.0
    }

    /// Whole seconds, rounding toward negative infinity.
    pub fn as_secs_floor(self) -> i64 {
        self.0.div_euclid(1000)
    }

    /// Whole seconds, rounding toward positive infinity.
    pub fn as_secs_ceil(self) -> i64 {
        -(-self.0).div_euclid(1000)
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    pub const fn plus_secs(self, secs: i64) -> Self {
        Timestamp(self.0 + secs * 1000)
    }

    pub const fn plus_millis(self, ms: i64) -> Self {
        Timestamp(self.0 + ms)
    }

    /// Signed difference `self - earlier` in milliseconds.
    pub const fn millis_since(self, earlier: Timestamp) -> i64 {
        self.0 - earlier.0
    }

    pub fn from_date_time(date: NaiveDate, time: NaiveTime) -> Self {
        let dt = NaiveDateTime::new(date, time).and_utc();
        Timestamp(dt.timestamp_millis())
    }

    pub fn to_datetime(self) -> DateTime<Utc> {
        DateTime::<Utc>::from_timestamp_millis(self.0).unwrap_or_default()
    }

    /// Splits into a UTC calendar date and time of day (second precision).
    pub fn to_date_time(self) -> (NaiveDate, NaiveTime) {
        let dt = DateTime::<Utc>::from_timestamp(self.as_secs_floor(), 0).unwrap_or_default();
        (dt.date_naive(), dt.time())
    }

    /// Parses an RFC 3339 / ISO-8601 UTC instant such as `2012-05-01T10:00:00Z`.
    pub fn parse_rfc3339(s: &str) -> Option<Self> {
        DateTime::parse_from_rfc3339(s)
            .ok()
            .map(|dt| Timestamp(dt.with_timezone(&Utc).timestamp_millis()))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_datetime().format("%Y-%m-%dT%H:%M:%S%.3fZ"))
    }
}

/// Adds milliseconds.
impl Add<i64> for Timestamp {
    type Output = Timestamp;
    fn add(self, ms: i64) -> Timestamp {
        Timestamp(self.0 + ms)
    }
}

/// Difference in milliseconds.
impl Sub for Timestamp {
    type Output = i64;
    fn sub(self, rhs: Timestamp) -> i64 {
        self.0 - rhs.0
    }
}

/// Converts fractional seconds (as used in configuration files) to milliseconds.
pub fn secs_to_millis(secs: f64) -> i64 {
    (secs * 1000.0).round() as i64
}
