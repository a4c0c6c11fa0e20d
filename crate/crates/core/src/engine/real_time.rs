//! Host-clock engine: a replay thread, the adaptation loop on its own
//! thread, and the worker on the calling thread.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crate::clock::StopSignal;
use crate::domain::ArrivalTrace;
use crate::loadgen::{replay_real_time, IngestTarget, PayloadSource, ReplayReport};
use crate::runtime::{MetricsSink, ResultStorage};

use super::{EngineError, ManagedSystem, RunControl, RunOutcome};

const STORAGE_BUFFER: usize = 1024;
const STORAGE_RETRY: Duration = Duration::from_millis(10);

pub fn run_real_time(
    sys: &ManagedSystem,
    trace: &ArrivalTrace,
    control: &RunControl,
    target: Option<Arc<dyn IngestTarget>>,
) -> Result<RunOutcome, EngineError> {
    let mut processor = sys.processor()?;
    // an external executor takes its own time; only simulation sleeps
    let simulated = sys.config.executor.is_none();
    let mut payloads = PayloadSource::from_spec(&sys.config.payload)?;
    let target: Arc<dyn IngestTarget> = target.unwrap_or_else(|| sys.backlog.clone());
    let idle = Duration::from_secs_f64(sys.config.worker_idle_poll);
    let limit = sys.config.request_limit;
    let period = sys.config.mape_period;
    let sink: Arc<dyn MetricsSink> = sys.knowledge.clone();
    let storage = ResultStorage::spawn(sink, STORAGE_BUFFER, STORAGE_RETRY);
    let mape_stop = StopSignal::new();
    let replay_done = AtomicBool::new(false);

    let (ticks, replay) = std::thread::scope(|s| {
        let mape = s.spawn(|| {
            let mut l = sys.mape_loop();
            l.run(sys.clock.as_ref(), period, &mape_stop)
        });
        let replay = s.spawn(|| {
            let report = replay_real_time(
                trace,
                target.as_ref(),
                &mut payloads,
                sys.clock.as_ref(),
                &control.stop,
            );
            replay_done.store(true, Ordering::Release);
            report
        });

        loop {
            if control.stop_requested() && !control.draining() {
                break;
            }
            if limit.is_some_and(|l| processor.processed() >= l) {
                control.request_stop(false);
                break;
            }
            let Some(req) = sys.backlog.dequeue_wait(idle, || sys.clock.now()) else {
                if replay_done.load(Ordering::Acquire) && sys.backlog.queue_depth() == 0 {
                    break;
                }
                if !sys.backlog.is_open() {
                    std::thread::sleep(idle);
                }
                continue;
            };
            let depth = sys.backlog.queue_depth();
            let flight = processor.begin(req, depth);
            if simulated {
                let remaining = flight.start_time() + flight.service_time() - sys.clock.now();
                if remaining > 0.0 {
                    std::thread::sleep(Duration::from_secs_f64(remaining));
                }
            }
            let done = processor.complete(flight, sys.clock.now());
            storage.submit(done);
        }

        // the replay may still be running after a limit or a hard stop
        control.stop.trigger();
        let replay: ReplayReport = replay.join().unwrap_or_default();
        mape_stop.trigger();
        let ticks = mape.join().unwrap_or(0);
        (ticks, replay)
    });

    let stored = storage.close();
    Ok(RunOutcome {
        processed: processor.processed(),
        stored,
        ticks,
        replay,
        counters: sys.backlog.counters(),
        ended_at: sys.clock.now(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ClockMode, ExperimentConfig, StrategySpec};
    use crate::knowledge::IndexName;
    use crate::loadgen::{SynthSpec, TraceSpec};

    fn config(count: usize, gap: f64) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(
            "rt",
            TraceSpec::Synthetic {
                synth: SynthSpec::Constant { gap },
                count,
                seed: None,
            },
        );
        c.clock_mode = ClockMode::RealTime;
        c.mape_period = 0.05;
        c.strategy = StrategySpec::single("n");
        c
    }

    #[test]
    fn processes_trace_on_host_clock() {
        let c = config(20, 0.01);
        let trace = c.trace.load(0).unwrap();
        let sys = ManagedSystem::build(c, None).unwrap();
        let out = run_real_time(&sys, &trace, &RunControl::new(), None).unwrap();
        assert_eq!(out.processed, 20);
        assert_eq!(out.stored, 20);
        assert_eq!(sys.knowledge.len(IndexName::FinalMetrics), 20);
        assert!(out.counters.conserved());
        assert!(out.ended_at >= 0.2);
        let records = sys.knowledge.metrics_records().unwrap();
        for r in &records {
            assert!(r.total_time >= r.model_processing_time);
            assert!(r.timestamp > 1.0e9, "timestamps are UNIX time");
        }
    }

    #[test]
    fn stop_with_drain_finishes_queue() {
        let mut c = config(1000, 0.005);
        c.strategy = StrategySpec::single("s");
        let trace = c.trace.load(0).unwrap();
        let sys = ManagedSystem::build(c, None).unwrap();
        let control = Arc::new(RunControl::new());
        let ctl = control.clone();
        std::thread::spawn(move || {
            std::thread::sleep(Duration::from_millis(100));
            ctl.request_stop(true);
        });
        let out = run_real_time(&sys, &trace, &control, None).unwrap();
        assert!(out.replay.sent < 1000);
        assert_eq!(out.counters.depth, 0);
        assert_eq!(out.processed, out.counters.dequeued_total);
        assert_eq!(out.processed, out.replay.accepted);
    }

    #[test]
    fn request_limit_in_real_time() {
        let mut c = config(50, 0.002);
        c.request_limit = Some(10);
        let trace = c.trace.load(0).unwrap();
        let sys = ManagedSystem::build(c, None).unwrap();
        let out = run_real_time(&sys, &trace, &RunControl::new(), None).unwrap();
        assert_eq!(out.processed, 10);
        assert_eq!(out.stored, 10);
    }
}
