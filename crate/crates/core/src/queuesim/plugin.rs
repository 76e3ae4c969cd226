use super::{QueueError, ReservationRecord, Snapshot};
use crate::time::Timestamp;

/// The interface a resource agent uses to talk to its batch system.
///
/// `availability` and `reserve` are the queries a site adapter must answer;
/// the remaining methods manage the lifecycle of a reservation once issued.
pub trait QueueSystem: Send {
    fn total_cores(&self) -> u64;

    fn availability(&self, start: Timestamp, cores: u64, duration_secs: i64) -> Result<Snapshot, QueueError>;

    fn reserve(&mut self, start: Timestamp, cores: u64, duration_secs: i64) -> Result<String, QueueError>;

    fn hold(&mut self, id: &str, deadline: Timestamp) -> Result<(), QueueError>;

    fn confirm(&mut self, id: &str) -> Result<(), QueueError>;

    fn cancel(&mut self, id: &str) -> Result<(), QueueError>;

    fn expire(&mut self, id: &str) -> Result<(), QueueError>;

    fn reservation(&self, id: &str) -> Option<ReservationRecord>;

    /// Earliest start in `[from, latest]` at which the job fits.
    ///
    /// The default probes once a minute; implementations with a view of
    /// their occupancy change points should override it.
    fn earliest_feasible(
        &self,
        from: Timestamp,
        latest: Timestamp,
        cores: u64,
        duration_secs: i64,
    ) -> Result<Option<(Timestamp, Snapshot)>, QueueError> {
        let mut t = from;
        while t <= latest {
            let snap = self.availability(t, cores, duration_secs)?;
            if snap.feasible {
                return Ok(Some((t, snap)));
            }
            t = t.plus_secs(60);
        }
        Ok(None)
    }
}

/// Predicts how long a job of the given shape would wait in the queue.
pub trait WaitPredictor: Send {
    fn predicted_wait_secs(&self, cores: u64, duration_secs: i64) -> i64;
}

/// Wraps a queue so that every start time is pushed back by a predicted
/// queue wait. Intended for sites without advance reservation support.
pub struct PredictiveQueue<Q, P> {
    inner: Q,
    predictor: P,
}

impl<Q: QueueSystem, P: WaitPredictor> PredictiveQueue<Q, P> {
    pub fn new(inner: Q, predictor: P) -> Self {
        PredictiveQueue { inner, predictor }
    }

    pub fn into_inner(self) -> Q {
        self.inner
    }

    fn shifted(&self, start: Timestamp, cores: u64, duration_secs: i64) -> Timestamp {
        start.plus_secs(self.predictor.predicted_wait_secs(cores, duration_secs).max(0))
    }
}

impl<Q: QueueSystem, P: WaitPredictor> QueueSystem for PredictiveQueue<Q, P> {
    fn total_cores(&self) -> u64 {
        self.inner.total_cores()
    }

    fn availability(&self, start: Timestamp, cores: u64, duration_secs: i64) -> Result<Snapshot, QueueError> {
        self.inner
            .availability(self.shifted(start, cores, duration_secs), cores, duration_secs)
    }

    fn reserve(&mut self, start: Timestamp, cores: u64, duration_secs: i64) -> Result<String, QueueError> {
        let at = self.shifted(start, cores, duration_secs);
        self.inner.reserve(at, cores, duration_secs)
    }

    fn hold(&mut self, id: &str, deadline: Timestamp) -> Result<(), QueueError> {
        self.inner.hold(id, deadline)
    }

    fn confirm(&mut self, id: &str) -> Result<(), QueueError> {
        self.inner.confirm(id)
    }

    fn cancel(&mut self, id: &str) -> Result<(), QueueError> {
        self.inner.cancel(id)
    }

    fn expire(&mut self, id: &str) -> Result<(), QueueError> {
        self.inner.expire(id)
    }

    fn reservation(&self, id: &str) -> Option<ReservationRecord> {
        self.inner.reservation(id)
    }
}
