//! A historic SWF log replayed as a live queue.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::swf::SwfLog;
use super::{QueueError, QueueSystem, ReservationRecord, ReservationState, Snapshot};
use crate::time::Timestamp;

/// Maps wall-clock time onto log time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimClock {
    pub system_start: Timestamp,
    /// Seconds into the log at which `system_start` falls.
    pub log_offset: i64,
}

impl SimClock {
    pub fn new(system_start: Timestamp, log_offset: i64) -> Result<Self, QueueError> {
        if log_offset < 0 {
            return Err(QueueError::NegativeOffset(log_offset));
        }
        Ok(SimClock {
            system_start,
            log_offset,
        })
    }

    /// `(wall_now - system_start) + log_offset`, in whole seconds.
    pub fn log_time(&self, wall_now: Timestamp) -> Result<i64, QueueError> {
        if wall_now < self.system_start {
            return Err(QueueError::BeforeSystemStart {
                wall: wall_now,
                start: self.system_start,
            });
        }
        Ok(wall_now.millis_since(self.system_start).div_euclid(1000) + self.log_offset)
    }

    pub fn wall_time(&self, log_secs: i64) -> Timestamp {
        self.system_start.plus_secs(log_secs - self.log_offset)
    }
}

/// Machine configuration: the parameters of the original `fake_qstat`
/// scripts plus the core count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineConfig {
    pub log_path: PathBuf,
    pub time_offset_seconds: i64,
    /// RFC 3339 instant, or `"now"` to start the replay when the agent starts.
    #[serde(default = "default_start")]
    pub system_start: String,
    pub total_cores: u64,
}

fn default_start() -> String {
    "now".into()
}

impl MachineConfig {
    pub fn resolve_start(&self, now: Timestamp) -> Result<Timestamp, QueueError> {
        if self.system_start == "now" {
            Ok(now)
        } else {
            Timestamp::parse_rfc3339(&self.system_start)
                .ok_or_else(|| QueueError::BadConfig(format!("system_start {:?}", self.system_start)))
        }
    }
}

/// Piecewise-constant core occupancy built from the log.
#[derive(Debug, Clone, Default)]
struct StepFunction {
    /// `(time, occupied cores from this time on)`, strictly increasing times.
    steps: Vec<(i64, u64)>,
}

impl StepFunction {
    fn from_log(log: &SwfLog) -> Self {
        let mut deltas: BTreeMap<i64, i64> = BTreeMap::new();
        for occ in log.jobs.iter().filter_map(|j| j.occupancy()) {
            *deltas.entry(occ.start).or_default() += occ.cores as i64;
            *deltas.entry(occ.end).or_default() -= occ.cores as i64;
        }
        let mut level = 0i64;
        let mut steps = Vec::with_capacity(deltas.len());
        for (t, d) in deltas {
            if d == 0 {
                continue;
            }
            level += d;
            steps.push((t, level.max(0) as u64));
        }
        StepFunction { steps }
    }

    fn at(&self, t: i64) -> u64 {
        match self.steps.partition_point(|&(s, _)| s <= t) {
            0 => 0,
            i => self.steps[i - 1].1,
        }
    }

    /// Change points strictly inside `(from, to)`.
    fn changes_in(&self, from: i64, to: i64) -> &[(i64, u64)] {
        let lo = self.steps.partition_point(|&(s, _)| s <= from);
        let hi = self.steps.partition_point(|&(s, _)| s < to);
        &self.steps[lo..hi.max(lo)]
    }
}

/// A machine whose background load comes from an SWF log and whose
/// reservations are inserted on top of it.
#[derive(Debug, Clone)]
pub struct MachineModel {
    name: String,
    total_cores: u64,
    log: Arc<SwfLog>,
    clock: SimClock,
    background: StepFunction,
    /// Keyed by `(start, sequence)`.
    reservations: BTreeMap<(i64, u64), ReservationRecord>,
    index: HashMap<String, (i64, u64)>,
    longest: i64,
    next_seq: u64,
}

impl MachineModel {
    pub fn new(name: impl Into<String>, total_cores: u64, log: Arc<SwfLog>, clock: SimClock) -> Result<Self, QueueError> {
        if total_cores == 0 {
            return Err(QueueError::BadConfig("total_cores must be positive".into()));
        }
        let background = StepFunction::from_log(&log);
        Ok(MachineModel {
            name: name.into(),
            total_cores,
            log,
            clock,
            background,
            reservations: BTreeMap::new(),
            index: HashMap::new(),
            longest: 0,
            next_seq: 0,
        })
    }

    pub fn from_config(name: impl Into<String>, cfg: &MachineConfig, now: Timestamp) -> Result<Self, QueueError> {
        let log = SwfLog::load(&cfg.log_path).map_err(|e| QueueError::BadConfig(e.to_string()))?;
        let clock = SimClock::new(cfg.resolve_start(now)?, cfg.time_offset_seconds)?;
        Self::new(name, cfg.total_cores, Arc::new(log), clock)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn clock(&self) -> SimClock {
        self.clock
    }

    pub fn log(&self) -> &SwfLog {
        &self.log
    }

    pub fn reservations(&self) -> impl Iterator<Item = &ReservationRecord> {
        self.reservations.values()
    }

    fn live_overlapping(&self, from: i64, to: i64) -> impl Iterator<Item = &ReservationRecord> {
        let lo = (from - self.longest, 0);
        self.reservations
            .range(lo..(to, 0))
            .map(|(_, r)| r)
            .filter(move |r| r.state.occupies() && r.end() > from && r.start < to)
    }

    /// Occupied cores at log second `t`.
    pub fn occupied_at(&self, t: i64) -> u64 {
        let reserved: u64 = self
            .live_overlapping(t, t + 1)
            .map(|r| r.cores)
            .sum();
        self.background.at(t) + reserved
    }

    /// Maximum occupancy over `[from, to)` in log seconds.
    pub fn max_occupied(&self, from: i64, to: i64) -> u64 {
        let mut points: Vec<i64> = vec![from];
        points.extend(self.background.changes_in(from, to).iter().map(|&(t, _)| t));
        let overlapping: Vec<&ReservationRecord> = self.live_overlapping(from, to).collect();
        for r in &overlapping {
            if r.start > from && r.start < to {
                points.push(r.start);
            }
        }
        points
            .into_iter()
            .map(|t| {
                self.background.at(t)
                    + overlapping
                        .iter()
                        .filter(|r| r.start <= t && t < r.end())
                        .map(|r| r.cores)
                        .sum::<u64>()
            })
            .max()
            .unwrap_or(0)
    }

    /// Load and feasibility for `cores` over `[at, at + duration)`, log time.
    pub fn snapshot_load(&self, at: i64, cores: u64, duration: i64) -> Result<Snapshot, QueueError> {
        if cores == 0 || duration <= 0 {
            return Err(QueueError::InvalidQuery { cores, duration });
        }
        let occupied = self.max_occupied(at, at + duration);
        Ok(Snapshot::new(occupied, cores, self.total_cores))
    }

    /// Inserts a tentative reservation over `[at, at + duration)`, log time.
    pub fn place_reservation(&mut self, at: i64, cores: u64, duration: i64) -> Result<String, QueueError> {
        let snap = self.snapshot_load(at, cores, duration)?;
        if !snap.feasible {
            return Err(QueueError::Infeasible {
                cores,
                free: self.total_cores.saturating_sub(snap.occupied_cores),
            });
        }
        self.next_seq += 1;
        let seq = self.next_seq;
        let id = format!("{}-res-{seq}", self.name);
        self.longest = self.longest.max(duration);
        let record = ReservationRecord {
            reservation_id: id.clone(),
            cores,
            start: at,
            duration,
            state: ReservationState::Tentative,
            hold_deadline: None,
        };
        self.reservations.insert((at, seq), record);
        self.index.insert(id.clone(), (at, seq));
        Ok(id)
    }

    pub fn reservation(&self, id: &str) -> Option<&ReservationRecord> {
        self.index.get(id).and_then(|k| self.reservations.get(k))
    }

    fn reservation_mut(&mut self, id: &str) -> Result<&mut ReservationRecord, QueueError> {
        let key = *self
            .index
            .get(id)
            .ok_or_else(|| QueueError::UnknownReservation(id.to_string()))?;
        Ok(self.reservations.get_mut(&key).expect("index and map agree"))
    }

    fn transition(&mut self, id: &str, to: ReservationState) -> Result<(), QueueError> {
        let r = self.reservation_mut(id)?;
        if r.state == to {
            return Ok(());
        }
        if !r.state.can_move_to(to) {
            return Err(QueueError::InvalidTransition {
                id: id.to_string(),
                from: r.state,
                to,
            });
        }
        r.state = to;
        if to != ReservationState::Held {
            r.hold_deadline = None;
        }
        Ok(())
    }

    pub fn hold_reservation(&mut self, id: &str, deadline: Timestamp) -> Result<(), QueueError> {
        self.transition(id, ReservationState::Held)?;
        self.reservation_mut(id)?.hold_deadline = Some(deadline);
        Ok(())
    }

    pub fn confirm_reservation(&mut self, id: &str) -> Result<(), QueueError> {
        self.transition(id, ReservationState::Confirmed)
    }

    /// Cancels a reservation; cancelling a dead reservation is a no-op.
    pub fn cancel_reservation(&mut self, id: &str) -> Result<(), QueueError> {
        let r = self.reservation_mut(id)?;
        if !r.state.occupies() {
            return Ok(());
        }
        self.transition(id, ReservationState::Cancelled)
    }

    pub fn expire_reservation(&mut self, id: &str) -> Result<(), QueueError> {
        self.transition(id, ReservationState::Expired)
    }

    fn log_secs(&self, wall: Timestamp) -> Result<i64, QueueError> {
        self.clock.log_time(wall)
    }
}

impl QueueSystem for MachineModel {
    fn total_cores(&self) -> u64 {
        self.total_cores
    }

    fn availability(&self, start: Timestamp, cores: u64, duration_secs: i64) -> Result<Snapshot, QueueError> {
        self.snapshot_load(self.log_secs(start)?, cores, duration_secs)
    }

    fn reserve(&mut self, start: Timestamp, cores: u64, duration_secs: i64) -> Result<String, QueueError> {
        let at = self.log_secs(start)?;
        self.place_reservation(at, cores, duration_secs)
    }

    fn hold(&mut self, id: &str, deadline: Timestamp) -> Result<(), QueueError> {
        self.hold_reservation(id, deadline)
    }

    fn confirm(&mut self, id: &str) -> Result<(), QueueError> {
        self.confirm_reservation(id)
    }

    fn cancel(&mut self, id: &str) -> Result<(), QueueError> {
        self.cancel_reservation(id)
    }

    fn expire(&mut self, id: &str) -> Result<(), QueueError> {
        self.expire_reservation(id)
    }

    fn reservation(&self, id: &str) -> Option<ReservationRecord> {
        MachineModel::reservation(self, id).cloned()
    }

    /// Exact search: feasibility can only turn on where occupancy drops, so
    /// the candidates are `from` and every change point up to `latest`.
    fn earliest_feasible(
        &self,
        from: Timestamp,
        latest: Timestamp,
        cores: u64,
        duration_secs: i64,
    ) -> Result<Option<(Timestamp, Snapshot)>, QueueError> {
        if latest < from {
            return Ok(None);
        }
        let from_log = self.clock.log_time(from)?;
        // A start that is not on a whole log second rounds up to the next one.
        let from_log = if self.clock.wall_time(from_log) < from { from_log + 1 } else { from_log };
        let latest_log = self.clock.log_time(latest)?;
        if latest_log < from_log {
            return Ok(None);
        }
        let mut candidates: Vec<i64> = vec![from_log];
        candidates.extend(
            self.background
                .changes_in(from_log, latest_log + 1)
                .iter()
                .map(|&(t, _)| t),
        );
        candidates.extend(
            self.live_overlapping(from_log - 1, latest_log + 1)
                .map(|r| r.end())
                .filter(|&e| e > from_log && e <= latest_log),
        );
        candidates.sort_unstable();
        candidates.dedup();
        for t in candidates {
            let snap = self.snapshot_load(t, cores, duration_secs)?;
            if snap.feasible {
                return Ok(Some((self.clock.wall_time(t), snap)));
            }
        }
        Ok(None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::queuesim::swf::parse_swf;

    fn job_line(id: i64, start: i64, walltime: i64, cores: i64) -> String {
        format!("{id} {start} 0 {walltime} {cores} -1 -1 {cores} {walltime} -1 1 1 1 1 1 -1 -1 -1")
    }

    fn machine(total: u64, jobs: &[(i64, i64, i64)]) -> MachineModel {
        let text: Vec<String> = jobs
            .iter()
            .enumerate()
            .map(|(i, &(s, w, c))| job_line(i as i64 + 1, s, w, c))
            .collect();
        let log = parse_swf(&text.join("\n")).unwrap();
        let clock = SimClock::new(Timestamp::from_secs(1_000_000), 0).unwrap();
        MachineModel::new("m", total, Arc::new(log), clock).unwrap()
    }

    #[test]
    fn log_time_follows_offset() {
        let start = Timestamp::from_secs(1_700_000_000);
        let clock = SimClock::new(start, 0).unwrap();
        assert_eq!(clock.log_time(start).unwrap(), 0);
        let clock = SimClock::new(start, 3_370_000).unwrap();
        assert_eq!(clock.log_time(start.plus_secs(60)).unwrap(), 3_370_060);
        assert!(clock.log_time(start.plus_secs(-1)).is_err());
        assert!(SimClock::new(start, -5).is_err());
    }

    #[test]
    fn overlapping_jobs_saturate_window() {
        let m = machine(8, &[(0, 100, 4), (10, 100, 4)]);
        let s = m.snapshot_load(50, 2, 10).unwrap();
        assert!(!s.feasible);
        assert_eq!(s.load_fraction(), 1.0);
        let s = m.snapshot_load(150, 2, 10).unwrap();
        assert!(s.feasible);
        assert_eq!(s.load_fraction(), 0.0);
        let s = m.snapshot_load(105, 2, 10).unwrap();
        assert!(s.feasible);
        assert_eq!(s.occupied_cores, 4);
    }

    #[test]
    fn empty_log_is_idle() {
        let m = machine(8, &[]);
        let s = m.snapshot_load(12345, 8, 3600).unwrap();
        assert!(s.feasible);
        assert_eq!(s.load_fraction(), 0.0);
        assert!(!m.snapshot_load(0, 9, 10).unwrap().feasible);
        assert!(m.snapshot_load(0, 0, 10).is_err());
        assert!(m.snapshot_load(0, 1, 0).is_err());
    }

    #[test]
    fn reservations_consume_capacity() {
        let mut m = machine(8, &[]);
        let id = m.place_reservation(100, 8, 100).unwrap();
        assert!(!m.snapshot_load(150, 1, 1).unwrap().feasible);
        assert!(m.snapshot_load(200, 8, 10).unwrap().feasible);
        assert!(m.snapshot_load(90, 1, 10).unwrap().feasible);
        assert!(!m.snapshot_load(90, 1, 11).unwrap().feasible);
        m.cancel_reservation(&id).unwrap();
        assert_eq!(m.snapshot_load(150, 8, 10).unwrap().occupied_cores, 0);
    }

    #[test]
    fn third_reservation_is_refused() {
        let mut m = machine(8, &[]);
        let a = m.place_reservation(0, 4, 50).unwrap();
        let b = m.place_reservation(0, 4, 50).unwrap();
        assert_ne!(a, b);
        assert!(matches!(m.place_reservation(0, 4, 50), Err(QueueError::Infeasible { free: 0, .. })));
    }

    #[test]
    fn cancel_is_idempotent_and_checked() {
        let mut m = machine(8, &[]);
        let id = m.place_reservation(0, 4, 50).unwrap();
        m.cancel_reservation(&id).unwrap();
        m.cancel_reservation(&id).unwrap();
        assert_eq!(m.reservation(&id).unwrap().state, ReservationState::Cancelled);
        assert!(matches!(m.cancel_reservation("nope"), Err(QueueError::UnknownReservation(_))));
    }

    #[test]
    fn lifecycle_transitions() {
        let mut m = machine(8, &[]);
        let id = m.place_reservation(0, 4, 50).unwrap();
        m.hold_reservation(&id, Timestamp::from_secs(10)).unwrap();
        assert_eq!(m.reservation(&id).unwrap().hold_deadline, Some(Timestamp::from_secs(10)));
        m.confirm_reservation(&id).unwrap();
        assert_eq!(m.reservation(&id).unwrap().hold_deadline, None);
        assert!(m.expire_reservation(&id).is_err());
        m.cancel_reservation(&id).unwrap();
        assert!(m.confirm_reservation(&id).is_err());
    }

    #[test]
    fn earliest_feasible_waits_for_release() {
        let m = machine(8, &[(0, 100, 6)]);
        let clock = m.clock();
        let from = clock.wall_time(10);
        let (t, snap) = m
            .earliest_feasible(from, clock.wall_time(1000), 4, 50)
            .unwrap()
            .unwrap();
        assert_eq!(t, clock.wall_time(100));
        assert!(snap.feasible);
        assert!(m
            .earliest_feasible(from, clock.wall_time(99), 4, 50)
            .unwrap()
            .is_none());
        let (t, _) = m.earliest_feasible(from, clock.wall_time(1000), 2, 50).unwrap().unwrap();
        assert_eq!(t, from);
    }

    #[test]
    fn earliest_feasible_sees_reservation_ends() {
        let mut m = machine(8, &[]);
        m.place_reservation(0, 8, 300).unwrap();
        let clock = m.clock();
        let (t, _) = m
            .earliest_feasible(clock.wall_time(0), clock.wall_time(10_000), 1, 10)
            .unwrap()
            .unwrap();
        assert_eq!(t, clock.wall_time(300));
    }

    #[test]
    fn identical_calls_give_identical_ids() {
        let run = || {
            let mut m = machine(16, &[(0, 50, 3)]);
            let ids: Vec<String> = (0..4).map(|i| m.place_reservation(i * 10, 3, 40).unwrap()).collect();
            (ids, m.snapshot_load(20, 1, 5).unwrap())
        };
        assert_eq!(run(), run());
    }
}
