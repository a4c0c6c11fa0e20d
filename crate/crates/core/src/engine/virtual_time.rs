//! Discrete-event engine: time jumps from event to event, so a run takes
//! as long as the computation and is fully determined by config and seed.
//!
//! At equal times a completion goes first, then an arrival, then a tick.

use crate::domain::{ArrivalTrace, Payload};
use crate::ingestion::IngestError;
use crate::loadgen::{issue_times, PayloadSource, SubmitError};
use crate::runtime::{InFlight, MetricsSink, Processor};

use super::{EngineError, ManagedSystem, RunControl, RunOutcome};

enum Event {
    Finish,
    Arrival,
    Tick,
}

pub fn run_virtual(
    sys: &ManagedSystem,
    trace: &ArrivalTrace,
    control: &RunControl,
) -> Result<RunOutcome, EngineError> {
    let clock = sys
        .manual
        .clone()
        .expect("virtual-time systems are built with a manual clock");
    let mut processor = sys.processor()?;
    let mut mape = sys.mape_loop();
    let mut payloads = PayloadSource::from_spec(&sys.config.payload)?;
    let inline = sys.config.executor.is_some();
    let period = sys.config.mape_period;
    let limit = sys.config.request_limit;
    let times = issue_times(trace);

    let mut outcome = RunOutcome::default();
    let mut next_arrival = 0usize;
    let mut next_tick = mape.period(period);
    let mut in_flight: Option<(InFlight, f64)> = None;
    let mut arrivals_open = true;
    let mut serving = true;
    let mut now = 0.0f64;

    let start = |processor: &mut Processor, at: f64| -> Option<(InFlight, f64)> {
        let req = sys.backlog.dequeue_oldest(at)?;
        let depth = sys.backlog.queue_depth();
        let flight = processor.begin(req, depth);
        let finish = flight.start_time() + flight.service_time();
        Some((flight, finish))
    };

    loop {
        if control.stop_requested() {
            arrivals_open = false;
            if !control.draining() {
                serving = false;
            }
        }
        let arrival = (arrivals_open && next_arrival < times.len()).then(|| times[next_arrival]);
        let finish = in_flight.as_ref().map(|(_, t)| *t);
        if arrival.is_none() && finish.is_none() {
            // idle worker with an empty (or abandoned) queue
            break;
        }
        let f = finish.unwrap_or(f64::INFINITY);
        let a = arrival.unwrap_or(f64::INFINITY);
        let event = if f <= a && f <= next_tick {
            Event::Finish
        } else if a <= next_tick {
            Event::Arrival
        } else {
            Event::Tick
        };
        match event {
            Event::Finish => {
                now = f;
                clock.set(now);
                let (flight, at) = in_flight
                    .take()
                    .expect("finish implies a request in service");
                let done = processor.complete(flight, at);
                sys.knowledge.store(&done.record, &done.log)?;
                outcome.stored += 1;
                if limit.is_some_and(|l| processor.processed() >= l) {
                    arrivals_open = false;
                    serving = false;
                }
                if serving {
                    in_flight = start(&mut processor, now);
                }
            }
            Event::Arrival => {
                now = a;
                clock.set(now);
                next_arrival += 1;
                let payload = if inline {
                    Payload::Inline {
                        bytes: payloads.next_bytes(),
                    }
                } else {
                    Payload::Synthetic {
                        len: payloads.next_len(),
                    }
                };
                let result = sys.backlog.ingest(payload, now).map_err(|e| match e {
                    IngestError::Dropped => SubmitError::Dropped,
                    IngestError::NotRunning => SubmitError::Closed,
                    IngestError::Spill(m) => SubmitError::Failed(m),
                });
                outcome.replay.record(&result);
                if in_flight.is_none() && serving {
                    in_flight = start(&mut processor, now);
                }
            }
            Event::Tick => {
                now = next_tick;
                clock.set(now);
                if let Err(e) = mape.tick(now) {
                    tracing::warn!("adaptation tick failed: {e}");
                }
                next_tick += mape.period(period);
            }
        }
    }

    outcome.processed = processor.processed();
    outcome.ticks = mape.ticks();
    outcome.counters = sys.backlog.counters();
    outcome.ended_at = now;
    Ok(outcome)
}
