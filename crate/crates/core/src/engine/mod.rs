//! Runs an experiment under either clock.
//!
//! [`ManagedSystem`] bundles the parts shared by both engines: the model
//! repository, the backlog, the knowledge store and the clock the records
//! are stamped with.

mod real_time;
mod virtual_time;

use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::Serialize;
use serde_json::json;

use crate::clock::{Clock, ManualClock, StopSignal, WallClock};
use crate::domain::{ClockMode, ExperimentConfig, KnowledgeState};
use crate::ingestion::{Backlog, BacklogCounters};
use crate::knowledge::{IndexName, Knowledge, KnowledgeError};
use crate::loadgen::{ReplayReport, TraceError};
use crate::mape::{MapeLoop, Strategy};
use crate::runtime::{
    Backend, ExternalExecutor, Processor, Repository, RuntimeError, WorkerSettings,
};

pub use real_time::run_real_time;
pub use virtual_time::run_virtual;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("engine thread panicked")]
    Panicked,
}

pub struct ManagedSystem {
    pub config: ExperimentConfig,
    pub repo: Arc<Repository>,
    pub backlog: Arc<Backlog>,
    pub knowledge: Arc<Knowledge>,
    pub clock: Arc<dyn Clock>,
    /// Added to clock readings to form record timestamps: 0 in virtual
    /// time, the UNIX start time in real time.
    pub epoch: f64,
    manual: Option<Arc<ManualClock>>,
}

impl ManagedSystem {
    /// Preloads the models and opens the knowledge store, under `dir` if
    /// given. The config is assumed valid.
    pub fn build(config: ExperimentConfig, dir: Option<&Path>) -> Result<Self, EngineError> {
        let repo = Arc::new(Repository::preload(
            config.profiles.clone(),
            config.initial_model(),
        )?);
        let state = KnowledgeState::new(
            repo.profiles().map(|p| p.id.as_str()),
            config.strategy.clone(),
        );
        let profiles = config.profiles.clone();
        let validator = Box::new(move |spec: &crate::domain::StrategySpec| {
            Strategy::from_spec(spec, &profiles)
                .map(|_| ())
                .map_err(|e| e.to_string())
        });
        let knowledge = match dir {
            Some(d) => Knowledge::persistent(d, state, false)?,
            None => Knowledge::in_memory(state),
        }
        .with_validator(validator);
        let mut backlog = Backlog::new(config.backlog_capacity);
        if let Some(d) = dir {
            backlog = backlog.with_spill(d.join("spill"), config.spill_threshold);
        }
        let (clock, manual, epoch): (Arc<dyn Clock>, _, f64) = match config.clock_mode {
            ClockMode::VirtualTime => {
                let m = Arc::new(ManualClock::new(0.0));
                (m.clone(), Some(m), 0.0)
            }
            ClockMode::RealTime => {
                let w = WallClock::start();
                let epoch = w.epoch();
                (Arc::new(w), None, epoch)
            }
        };
        let sys = Self {
            config,
            repo,
            backlog: Arc::new(backlog),
            knowledge: Arc::new(knowledge),
            clock,
            epoch,
            manual,
        };
        let mut started = json!({
            "timestamp": sys.epoch,
            "event": "experiment_started",
            "experiment_id": sys.config.experiment_id,
            "clock_mode": sys.config.clock_mode.to_string(),
            "strategy": sys.config.strategy,
            "initial_model": sys.repo.active_id(),
            "models": sys.repo.profiles().map(|p| p.id.as_str()).collect::<Vec<_>>(),
        });
        if sys.host_timing() {
            let preload: serde_json::Map<String, serde_json::Value> = sys
                .repo
                .preload_times()
                .map(|(id, t)| (id.to_string(), json!(t.as_secs_f64())))
                .collect();
            started["preload_seconds"] = preload.into();
        }
        sys.knowledge.append(IndexName::NewLogs, started)?;
        Ok(sys)
    }

    /// Current experiment time.
    pub fn now(&self) -> f64 {
        self.clock.now()
    }

    pub fn timestamp(&self) -> f64 {
        self.epoch + self.now()
    }

    fn processor(&self) -> Result<Processor, EngineError> {
        let c = &self.config;
        let backend = match &c.executor {
            Some(exec) => Backend::External(ExternalExecutor::spawn(exec)?),
            None => Backend::Simulated,
        };
        Ok(Processor::new(
            self.repo.clone(),
            WorkerSettings {
                seed: c.seed,
                confidence_threshold: c.confidence_threshold,
                class_filter: c.class_filter.clone(),
                class_universe: c.class_universe,
                target_response_time: c.target_response_time,
                epoch: self.epoch,
            },
            backend,
        ))
    }

    fn host_timing(&self) -> bool {
        self.config.clock_mode == ClockMode::RealTime
    }

    fn mape_loop(&self) -> MapeLoop {
        MapeLoop::new(
            self.repo.clone(),
            self.knowledge.clone(),
            self.backlog.clone(),
            self.config.target_response_time,
            self.config.monitor_window(),
            self.epoch,
        )
        .with_host_timing(self.host_timing())
    }
}

/// Stop request shared between a running engine and its controller.
#[derive(Debug, Default)]
pub struct RunControl {
    pub stop: StopSignal,
    drain: AtomicBool,
}

impl RunControl {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stops issuing arrivals. With `drain` the queued requests are still
    /// processed; without it only the request in service completes.
    pub fn request_stop(&self, drain: bool) {
        self.drain.store(drain, Ordering::Release);
        self.stop.trigger();
    }

    pub fn stop_requested(&self) -> bool {
        self.stop.is_set()
    }

    pub fn draining(&self) -> bool {
        self.drain.load(Ordering::Acquire)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunOutcome {
    pub processed: u64,
    pub stored: u64,
    pub ticks: u64,
    pub replay: ReplayReport,
    pub counters: BacklogCounters,
    /// Experiment time when the engine stopped.
    pub ended_at: f64,
}

/// Runs to completion under the configured clock, replaying `trace` into
/// the backlog (real time: through `target` if given).
pub fn run(
    sys: &ManagedSystem,
    trace: &crate::domain::ArrivalTrace,
    control: &RunControl,
    target: Option<Arc<dyn crate::loadgen::IngestTarget>>,
) -> Result<RunOutcome, EngineError> {
    let outcome = match sys.config.clock_mode {
        ClockMode::VirtualTime => run_virtual(sys, trace, control)?,
        ClockMode::RealTime => run_real_time(sys, trace, control, target)?,
    };
    sys.knowledge.append(
        IndexName::NewLogs,
        json!({
            "timestamp": sys.epoch + outcome.ended_at,
            "event": "experiment_finished",
            "processed": outcome.processed,
            "accepted": outcome.counters.accepted_total,
            "dropped": outcome.counters.dropped_total,
            "residual_depth": outcome.counters.depth,
            "ticks": outcome.ticks,
        }),
    )?;
    Ok(outcome)
}
