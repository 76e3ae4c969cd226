//! Standard Workload Format logs.
//!
//! Each data line has 18 whitespace-separated numeric fields; lines starting
//! with `;` are header comments. Fields the simulator does not interpret are
//! kept verbatim so a log can be written back out unchanged.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SWF_FIELDS: usize = 18;

#[derive(Debug, Error)]
pub enum SwfError {
    #[error("line {line}: expected {SWF_FIELDS} fields, found {found}")]
    FieldCount { line: usize, found: usize },
    #[error("line {line}: field {field} is not numeric: {value:?}")]
    NotNumeric { line: usize, field: usize, value: String },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One job record. Field names follow the SWF column definitions; `-1`
/// marks an unknown value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwfJob {
    pub job_id: i64,
    pub submit_time: i64,
    pub wait_time: i64,
    pub run_time: i64,
    pub allocated_processors: i64,
    pub average_cpu_time: f64,
    pub used_memory: f64,
    pub requested_processors: i64,
    pub requested_walltime: i64,
    pub requested_memory: f64,
    pub status: i64,
    pub user_id: i64,
    pub group_id: i64,
    pub executable: i64,
    pub queue: i64,
    pub partition: i64,
    pub preceding_job: i64,
    pub think_time: f64,
}

/// The span of cores and time a job holds in the simulated queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Occupancy {
    pub start: i64,
    pub end: i64,
    pub cores: u64,
}

impl SwfJob {
    /// Occupancy as seen by the queue: `[submit + wait, + requested walltime)`.
    ///
    /// An unknown requested walltime falls back to the run time, and an
    /// unknown allocation to the requested processors. Jobs with no usable
    /// start, duration or width occupy nothing.
    pub fn occupancy(&self) -> Option<Occupancy> {
        if self.submit_time < 0 || self.wait_time < 0 {
            return None;
        }
        let duration = if self.requested_walltime > 0 {
            self.requested_walltime
        } else if self.run_time > 0 {
            self.run_time
        } else {
            return None;
        };
        let cores = if self.allocated_processors > 0 {
            self.allocated_processors
        } else if self.requested_processors > 0 {
            self.requested_processors
        } else {
            return None;
        };
        let start = self.submit_time + self.wait_time;
        Some(Occupancy {
            start,
            end: start + duration,
            cores: cores as u64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SwfLog {
    /// Header comment lines, including the leading `;`.
    pub header: Vec<String>,
    /// Jobs ordered by submit time.
    pub jobs: Vec<SwfJob>,
}

impl SwfLog {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SwfError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| SwfError::Io {
            path: path.display().to_string(),
            source,
        })?;
        parse_swf(&text)
    }

    /// `MaxProcs` / `MaxNodes` header value, when present.
    pub fn header_max_procs(&self) -> Option<u64> {
        self.header.iter().find_map(|h| {
            let body = h.trim_start_matches(';').trim();
            let (key, value) = body.split_once(':')?;
            match key.trim() {
                "MaxProcs" => value.trim().parse().ok(),
                _ => None,
            }
        })
    }
}

pub fn parse_swf(text: &str) -> Result<SwfLog, SwfError> {
    let mut log = SwfLog::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed.starts_with(';') {
            log.header.push(trimmed.to_string());
            continue;
        }
        let tokens: Vec<&str> = trimmed.split_whitespace().collect();
        if tokens.len() != SWF_FIELDS {
            return Err(SwfError::FieldCount {
                line,
                found: tokens.len(),
            });
        }
        let int = |i: usize| -> Result<i64, SwfError> {
            let tok = tokens[i];
            tok.parse::<i64>()
                .ok()
                .or_else(|| {
                    tok.parse::<f64>()
                        .ok()
                        .filter(|f| f.is_finite() && f.fract() == 0.0)
                        .map(|f| f as i64)
                })
                .ok_or_else(|| SwfError::NotNumeric {
                    line,
                    field: i + 1,
                    value: tok.to_string(),
                })
        };
        let real = |i: usize| -> Result<f64, SwfError> {
            tokens[i]
                .parse::<f64>()
                .ok()
                .filter(|f| f.is_finite())
                .ok_or_else(|| SwfError::NotNumeric {
                    line,
                    field: i + 1,
                    value: tokens[i].to_string(),
                })
        };
        log.jobs.push(SwfJob {
            job_id: int(0)?,
            submit_time: int(1)?,
            wait_time: int(2)?,
            run_time: int(3)?,
            allocated_processors: int(4)?,
            average_cpu_time: real(5)?,
            used_memory: real(6)?,
            requested_processors: int(7)?,
            requested_walltime: int(8)?,
            requested_memory: real(9)?,
            status: int(10)?,
            user_id: int(11)?,
            group_id: int(12)?,
            executable: int(13)?,
            queue: int(14)?,
            partition: int(15)?,
            preceding_job: int(16)?,
            think_time: real(17)?,
        });
    }
    log.jobs.sort_by_key(|j| j.submit_time);
    Ok(log)
}

pub fn serialize_swf(log: &SwfLog) -> String {
    let mut out = String::new();
    for h in &log.header {
        out.push_str(h);
        out.push('\n');
    }
    for j in &log.jobs {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
            j.job_id,
            j.submit_time,
            j.wait_time,
            j.run_time,
            j.allocated_processors,
            j.average_cpu_time,
            j.used_memory,
            j.requested_processors,
            j.requested_walltime,
            j.requested_memory,
            j.status,
            j.user_id,
            j.group_id,
            j.executable,
            j.queue,
            j.partition,
            j.preceding_job,
            j.think_time
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO: &str = "; Version: 2.2\n; MaxProcs: 8\n\
1 0 0 100 4 -1 -1 4 100 -1 1 1 1 -1 1 -1 -1 -1\n\
2 10 0 100 4 -1 -1 4 100 -1 1 1 1 -1 1 -1 -1 -1\n";

    #[test]
    fn two_jobs() {
        let log = parse_swf(TWO).unwrap();
        assert_eq!(log.jobs.iter().map(|j| j.job_id).collect::<Vec<_>>(), [1, 2]);
        assert_eq!(log.header.len(), 2);
        assert_eq!(log.header_max_procs(), Some(8));
    }

    #[test]
    fn seventeen_fields_is_an_error() {
        let err = parse_swf("; c\n1 0 0 100 4 -1 -1 4 100 -1 1 1 1 -1 1 -1 -1\n").unwrap_err();
        assert!(matches!(err, SwfError::FieldCount { line: 2, found: 17 }));
    }

    #[test]
    fn non_numeric_is_an_error() {
        let err = parse_swf("1 0 0 abc 4 -1 -1 4 100 -1 1 1 1 -1 1 -1 -1 -1\n").unwrap_err();
        assert!(matches!(err, SwfError::NotNumeric { line: 1, field: 4, .. }));
        let err = parse_swf("1 0 0 1.5 4 -1 -1 4 100 -1 1 1 1 -1 1 -1 -1 -1\n").unwrap_err();
        assert!(matches!(err, SwfError::NotNumeric { field: 4, .. }));
    }

    #[test]
    fn decimals_in_opaque_fields_survive() {
        let text = "7 5 3 60 2 58.25 1024.5 2 120 -1 1 3 4 -1 1 -1 -1 -1\n";
        let log = parse_swf(text).unwrap();
        assert_eq!(log.jobs[0].average_cpu_time, 58.25);
        assert_eq!(parse_swf(&serialize_swf(&log)).unwrap(), log);
    }

    #[test]
    fn sorted_by_submit_time() {
        let text = "2 10 0 1 1 -1 -1 1 1 -1 1 1 1 -1 1 -1 -1 -1\n1 0 0 1 1 -1 -1 1 1 -1 1 1 1 -1 1 -1 -1 -1\n";
        let log = parse_swf(text).unwrap();
        assert_eq!(log.jobs[0].job_id, 1);
    }

    #[test]
    fn occupancy_sentinels() {
        let mut j = parse_swf(TWO).unwrap().jobs[0].clone();
        assert_eq!(j.occupancy(), Some(Occupancy { start: 0, end: 100, cores: 4 }));
        j.requested_walltime = -1;
        j.run_time = 40;
        assert_eq!(j.occupancy().unwrap().end, 40);
        j.run_time = -1;
        assert_eq!(j.occupancy(), None);
        j.requested_walltime = 50;
        j.allocated_processors = -1;
        assert_eq!(j.occupancy().unwrap().cores, 4);
        j.wait_time = -1;
        assert_eq!(j.occupancy(), None);
    }
}
