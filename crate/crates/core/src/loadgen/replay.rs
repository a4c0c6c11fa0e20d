use std::time::Duration;

use serde::Serialize;

use crate::clock::{Clock, StopSignal};
use crate::domain::{ArrivalTrace, Payload};
use crate::ingestion::{Backlog, IngestError};
use crate::report::percentile;

use super::PayloadSource;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SubmitError {
    #[error("request dropped")]
    Dropped,
    #[error("ingestion closed")]
    Closed,
    #[error("{0}")]
    Failed(String),
}

/// Anything that accepts replayed requests.
pub trait IngestTarget: Send + Sync {
    /// `issued_at` is the experiment-clock time of the issue.
    fn submit(&self, payload: Vec<u8>, issued_at: f64) -> Result<u64, SubmitError>;
}

impl IngestTarget for Backlog {
    fn submit(&self, payload: Vec<u8>, issued_at: f64) -> Result<u64, SubmitError> {
        self.ingest(Payload::Inline { bytes: payload }, issued_at)
            .map_err(|e| match e {
                IngestError::Dropped => SubmitError::Dropped,
                IngestError::NotRunning => SubmitError::Closed,
                IngestError::Spill(m) => SubmitError::Failed(m),
            })
    }
}

/// Absolute issue times: running sums of the gaps.
pub fn issue_times(trace: &ArrivalTrace) -> Vec<f64> {
    let mut t = 0.0;
    trace
        .gaps
        .iter()
        .map(|g| {
            t += g;
            t
        })
        .collect()
}

/// Lateness of issues against their schedule, in seconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ScheduleStats {
    pub samples: usize,
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub max: f64,
}

impl ScheduleStats {
    pub fn from_errors(mut errors: Vec<f64>) -> Self {
        if errors.is_empty() {
            return Self::default();
        }
        errors.sort_by(f64::total_cmp);
        Self {
            samples: errors.len(),
            mean: errors.iter().sum::<f64>() / errors.len() as f64,
            p50: percentile(&errors, 0.50),
            p95: percentile(&errors, 0.95),
            max: *errors.last().expect("non-empty"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ReplayReport {
    pub sent: u64,
    pub accepted: u64,
    pub dropped: u64,
    pub failed: u64,
    pub schedule: ScheduleStats,
}

impl ReplayReport {
    pub fn record(&mut self, outcome: &Result<u64, SubmitError>) {
        self.sent += 1;
        match outcome {
            Ok(_) => self.accepted += 1,
            Err(SubmitError::Dropped) => self.dropped += 1,
            Err(_) => self.failed += 1,
        }
    }
}

/// Spin for the last stretch before each deadline; sleeping is coarser.
const SPIN: f64 = 0.002;

/// Issues the trace open-loop against the host clock: each request goes out
/// at its scheduled time regardless of how earlier ones fared. Stops early
/// when `stop` is set.
pub fn replay_real_time(
    trace: &ArrivalTrace,
    target: &dyn IngestTarget,
    payloads: &mut PayloadSource,
    clock: &dyn Clock,
    stop: &StopSignal,
) -> ReplayReport {
    let mut report = ReplayReport::default();
    let mut errors = Vec::with_capacity(trace.len());
    let origin = clock.now();
    for offset in issue_times(trace) {
        let deadline = origin + offset;
        let ahead = deadline - clock.now() - SPIN;
        if ahead > 0.0 && stop.wait_timeout(Duration::from_secs_f64(ahead)) {
            break;
        }
        if stop.is_set() {
            break;
        }
        while clock.now() < deadline {
            std::hint::spin_loop();
            std::thread::yield_now();
        }
        let bytes = payloads.next_bytes();
        let issued_at = clock.now();
        errors.push(issued_at - deadline);
        let outcome = target.submit(bytes, issued_at);
        if let Err(e @ SubmitError::Failed(_)) = &outcome {
            tracing::warn!("replay submit failed: {e}");
        }
        report.record(&outcome);
        if outcome == Err(SubmitError::Closed) {
            break;
        }
    }
    report.schedule = ScheduleStats::from_errors(errors);
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::WallClock;
    use std::sync::Arc;

    #[test]
    fn issue_times_are_running_sums() {
        let t = ArrivalTrace::new(vec![0.5, 0.2, 0.3], "t");
        assert_eq!(issue_times(&t), vec![0.5, 0.7, 0.5 + 0.2 + 0.3]);
    }

    #[test]
    fn real_time_replay_into_backlog() {
        let backlog = Backlog::new(Some(3));
        let trace = ArrivalTrace::new(vec![0.01; 5], "t");
        let mut payloads = PayloadSource::Fixed(4);
        let clock = WallClock::start();
        let report = replay_real_time(&trace, &backlog, &mut payloads, &clock, &StopSignal::new());
        assert_eq!((report.sent, report.accepted, report.dropped), (5, 3, 2));
        assert_eq!(report.schedule.samples, 5);
        assert!(report.schedule.max < 0.05, "{:?}", report.schedule);
    }

    #[test]
    fn stop_cuts_replay_short() {
        let backlog = Backlog::new(None);
        let trace = ArrivalTrace::new(vec![10.0; 5], "t");
        let stop = Arc::new(StopSignal::new());
        let s = stop.clone();
        std::thread::spawn(move || {
            std::thread::sleep(Duration::from_millis(20));
            s.trigger();
        });
        let report = replay_real_time(
            &trace,
            &backlog,
            &mut PayloadSource::Fixed(1),
            &WallClock::start(),
            &stop,
        );
        assert_eq!(report.sent, 0);
    }

    #[test]
    fn closed_backlog_ends_replay() {
        let backlog = Backlog::new(None);
        backlog.close();
        let trace = ArrivalTrace::new(vec![0.0; 5], "t");
        let report = replay_real_time(
            &trace,
            &backlog,
            &mut PayloadSource::Fixed(1),
            &WallClock::start(),
            &StopSignal::new(),
        );
        assert_eq!((report.sent, report.failed), (1, 1));
    }
}
