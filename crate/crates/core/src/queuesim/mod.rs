//! Workload-log replay as a queuing system: availability snapshots and
//! advance reservations.

mod machine;
mod plugin;
pub mod swf;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pricing::LoadSnapshot;
use crate::time::Timestamp;

pub use machine::{MachineConfig, MachineModel, SimClock};
pub use plugin::{PredictiveQueue, QueueSystem, WaitPredictor};
pub use swf::{parse_swf, serialize_swf, SwfError, SwfJob, SwfLog};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QueueError {
    #[error("wall time {wall} is before system start {start}")]
    BeforeSystemStart { wall: Timestamp, start: Timestamp },
    #[error("log offset must be non-negative, got {0}")]
    NegativeOffset(i64),
    #[error("invalid query: {cores} cores for {duration} s")]
    InvalidQuery { cores: u64, duration: i64 },
    #[error("insufficient capacity: {cores} cores requested, {free} free")]
    Infeasible { cores: u64, free: u64 },
    #[error("unknown reservation {0}")]
    UnknownReservation(String),
    #[error("reservation {id} cannot move from {from:?} to {to:?}")]
    InvalidTransition {
        id: String,
        from: ReservationState,
        to: ReservationState,
    },
    #[error("bad machine configuration: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReservationState {
    Tentative,
    Held,
    Confirmed,
    Cancelled,
    Expired,
}

impl ReservationState {
    /// Whether the reservation still consumes cores.
    pub fn occupies(self) -> bool {
        matches!(self, Self::Tentative | Self::Held | Self::Confirmed)
    }

    pub fn can_move_to(self, to: ReservationState) -> bool {
        use ReservationState::*;
        matches!(
            (self, to),
            (Tentative, Held | Cancelled | Expired) | (Held, Confirmed | Cancelled | Expired) | (Confirmed, Cancelled)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReservationRecord {
    pub reservation_id: String,
    pub cores: u64,
    /// Log-time seconds.
    pub start: i64,
    pub duration: i64,
    pub state: ReservationState,
    pub hold_deadline: Option<Timestamp>,
}

impl ReservationRecord {
    pub fn end(&self) -> i64 {
        self.start + self.duration
    }
}

/// Result of an availability query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub feasible: bool,
    /// Peak cores in use over the queried window.
    pub occupied_cores: u64,
    pub total_cores: u64,
}

impl Snapshot {
    pub fn new(occupied: u64, requested: u64, total: u64) -> Self {
        Snapshot {
            feasible: occupied.saturating_add(requested) <= total,
            occupied_cores: occupied,
            total_cores: total,
        }
    }

    /// Exact load fraction, clamped to 1 when the log overcommits the machine.
    pub fn load_exact(&self) -> Ratio<i128> {
        LoadSnapshot::from_cores(self.occupied_cores, self.total_cores).exact()
    }

    pub fn load_fraction(&self) -> f64 {
        self.load().fraction()
    }

    pub fn load(&self) -> LoadSnapshot {
        LoadSnapshot::from_cores(self.occupied_cores, self.total_cores)
    }
}
