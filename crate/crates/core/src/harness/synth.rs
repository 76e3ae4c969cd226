//! Synthetic SWF workloads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::queuesim::{SwfJob, SwfLog};

fn job(id: i64, submit: i64, wait: i64, run: i64, cores: i64) -> SwfJob {
    SwfJob {
        job_id: id,
        submit_time: submit,
        wait_time: wait,
        run_time: run,
        allocated_processors: cores,
        average_cpu_time: -1.0,
        used_memory: -1.0,
        requested_processors: cores,
        requested_walltime: run,
        requested_memory: -1.0,
        status: 1,
        user_id: 1 + id % 17,
        group_id: 1 + id % 5,
        executable: -1,
        queue: 1,
        partition: 1,
        preceding_job: -1,
        think_time: -1.0,
    }
}

fn header(machine: &str, total_cores: u64) -> Vec<String> {
    vec![
        "; Version: 2.2".to_string(),
        format!("; Computer: {machine} (synthetic)"),
        format!("; MaxProcs: {total_cores}"),
        "; Note: generated workload, not a recorded trace".to_string(),
    ]
}

/// A log that holds exactly `fraction` of the machine busy over
/// `[from, to)` (log seconds), as back-to-back jobs of `chunk` seconds.
pub fn constant_load(machine: &str, total_cores: u64, fraction: f64, from: i64, to: i64, chunk: i64) -> SwfLog {
    let cores = (fraction.clamp(0.0, 1.0) * total_cores as f64).round() as i64;
    let mut jobs = Vec::new();
    if cores > 0 {
        let mut t = from;
        while t < to {
            let run = chunk.min(to - t);
            jobs.push(job(jobs.len() as i64 + 1, t, 0, run, cores));
            t += run;
        }
    }
    SwfLog {
        header: header(machine, total_cores),
        jobs,
    }
}

/// Parameters for a randomized batch workload.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomWorkload {
    pub total_cores: u64,
    /// Target mean fraction of cores in use.
    pub utilization: f64,
    pub from: i64,
    pub to: i64,
    pub seed: u64,
}

/// A randomized workload scheduled first-come first-served, so jobs queue
/// and get non-zero waits when the machine is busy.
pub fn random_workload(machine: &str, w: &RandomWorkload) -> SwfLog {
    let mut rng = ChaCha8Rng::seed_from_u64(w.seed);
    let max_width = (w.total_cores / 4).max(1);
    let widths: Vec<u64> = std::iter::successors(Some(1u64), |x| Some(x * 2))
        .take_while(|x| *x <= max_width)
        .collect();
    let mean_width = widths.iter().sum::<u64>() as f64 / widths.len() as f64;
    let mean_run = 4.0 * 3600.0;
    let span = (w.to - w.from).max(1) as f64;
    let n_jobs = ((w.utilization.clamp(0.0, 0.95) * w.total_cores as f64 * span) / (mean_width * mean_run)).round() as usize;
    let mut submits: Vec<i64> = (0..n_jobs).map(|_| rng.gen_range(w.from..w.to.max(w.from + 1))).collect();
    submits.sort_unstable();

    // Occupancy as (time, delta) change points; scanned linearly.
    let mut changes: Vec<(i64, i64)> = Vec::new();
    let mut jobs = Vec::with_capacity(n_jobs);
    let mut earliest = w.from;
    for (i, submit) in submits.into_iter().enumerate() {
        let width = widths[rng.gen_range(0..widths.len())] as i64;
        let run = rng.gen_range(1_800..=(2.0 * mean_run) as i64 - 1_800);
        let start = earliest_fit(&changes, submit.max(earliest), run, width, w.total_cores as i64);
        earliest = start;
        changes.push((start, width));
        changes.push((start + run, -width));
        changes.sort_unstable();
        jobs.push(job(i as i64 + 1, submit, start - submit, run, width));
    }
    SwfLog {
        header: header(machine, w.total_cores),
        jobs,
    }
}

fn earliest_fit(changes: &[(i64, i64)], from: i64, run: i64, width: i64, total: i64) -> i64 {
    let mut candidates: Vec<i64> = vec![from];
    candidates.extend(changes.iter().map(|c| c.0).filter(|t| *t > from));
    candidates.sort_unstable();
    candidates.dedup();
    'outer: for start in candidates {
        let mut used: i64 = changes.iter().filter(|c| c.0 <= start).map(|c| c.1).sum();
        if used + width > total {
            continue;
        }
        for c in changes.iter().filter(|c| c.0 > start && c.0 < start + run) {
            used += c.1;
            if used + width > total {
                continue 'outer;
            }
        }
        return start;
    }
    changes.iter().map(|c| c.0).max().unwrap_or(from).max(from)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_load_covers_the_window_exactly() {
        let log = constant_load("m", 100, 0.25, 1_000, 10_000, 3_600);
        let occ: Vec<_> = log.jobs.iter().filter_map(|j| j.occupancy()).collect();
        assert_eq!(occ.first().unwrap().start, 1_000);
        assert_eq!(occ.last().unwrap().end, 10_000);
        assert!(occ.iter().all(|o| o.cores == 25));
        assert!(occ.windows(2).all(|p| p[0].end == p[1].start));
        assert!(constant_load("m", 100, 0.0, 0, 10, 5).jobs.is_empty());
    }

    #[test]
    fn random_workload_never_overcommits() {
        let w = RandomWorkload {
            total_cores: 64,
            utilization: 0.7,
            from: 0,
            to: 200_000,
            seed: 7,
        };
        let log = random_workload("m", &w);
        assert!(!log.jobs.is_empty());
        let occ: Vec<_> = log.jobs.iter().filter_map(|j| j.occupancy()).collect();
        let mut points: Vec<i64> = occ.iter().map(|o| o.start).collect();
        points.sort_unstable();
        for t in points {
            let used: u64 = occ.iter().filter(|o| o.start <= t && t < o.end).map(|o| o.cores).sum();
            assert!(used <= 64, "{used} cores in use at {t}");
        }
        assert_eq!(random_workload("m", &w), log);
    }
}
