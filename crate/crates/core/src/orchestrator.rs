//! Experiment lifecycle: at most one experiment runs at a time. Each one
//! lives in `<data_dir>/<experiment_id>/` holding both index files and the
//! config it ran with.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread::JoinHandle;

use parking_lot::Mutex;
use serde::Serialize;
use serde_json::Value;

use crate::domain::{
    valid_experiment_id, validate_config, ClockMode, ConfigError, ExperimentConfig, MetricsRecord,
    Payload, StrategySpec,
};
use crate::engine::{self, EngineError, ManagedSystem, RunControl, RunOutcome};
use crate::ingestion::IngestError;
use crate::knowledge::{build_archive, IndexName, KnowledgeError, CONFIG_FILE};
use crate::loadgen::IngestTarget;
use crate::report::{ComparisonTable, ExperimentSummary};

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("an experiment is already running")]
    AlreadyRunning,
    #[error("invalid config: {}", list(.0))]
    InvalidConfig(Vec<ConfigError>),
    #[error("no experiment is running")]
    NotRunning,
    #[error("unknown experiment {0:?}")]
    UnknownExperiment(String),
    #[error("request dropped: backlog full")]
    Dropped,
    #[error("{0}")]
    Rejected(String),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("storage: {0}")]
    Io(#[from] std::io::Error),
}

fn list(errors: &[ConfigError]) -> String {
    errors
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Idle,
    Running,
    /// A stop was requested and the engine is winding down.
    Stopping,
    /// The trace is exhausted and the backlog drained, not yet stopped.
    Completed,
    Stopped,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatusReport {
    pub state: RunState,
    pub experiment_id: Option<String>,
    pub clock_mode: Option<ClockMode>,
    pub strategy: Option<String>,
    pub active_model: Option<String>,
    pub models: Vec<String>,
    pub queue_depth: usize,
    pub accepted: u64,
    pub dropped: u64,
    pub processed: usize,
    pub switches: u64,
    /// Experiment time, seconds since start.
    pub experiment_time: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

struct Running {
    system: Arc<ManagedSystem>,
    control: Arc<RunControl>,
    // taken while a stop joins the engine
    handle: Option<JoinHandle<Result<RunOutcome, EngineError>>>,
}

impl Running {
    fn engine_done(&self) -> bool {
        self.handle.as_ref().is_some_and(|h| h.is_finished())
    }
}

struct Finished {
    system: Arc<ManagedSystem>,
    summary: ExperimentSummary,
    error: Option<String>,
}

#[derive(Default)]
struct Slots {
    current: Option<Running>,
    last: Option<Finished>,
}

pub struct Orchestrator {
    data_dir: PathBuf,
    // start, stop and rule changes queue on this lock; `slots` is only
    // ever held briefly, so reads and ingestion proceed during a stop
    control: Mutex<()>,
    slots: Mutex<Slots>,
}

impl Orchestrator {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            control: Mutex::new(()),
            slots: Mutex::new(Slots::default()),
        }
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn experiment_dir(&self, id: &str) -> PathBuf {
        self.data_dir.join(id)
    }

    /// Where uploaded traces, payload archives and configs are staged.
    pub fn upload_dir(&self) -> PathBuf {
        self.data_dir.join("uploads")
    }

    pub fn start_experiment(
        &self,
        config: ExperimentConfig,
    ) -> Result<StatusReport, OrchestratorError> {
        self.start_with_target(config, None)
    }

    /// Starts an experiment. In real time the replay goes through `target`
    /// when given, else straight into the backlog.
    pub fn start_with_target(
        &self,
        config: ExperimentConfig,
        target: Option<Arc<dyn IngestTarget>>,
    ) -> Result<StatusReport, OrchestratorError> {
        let _serial = self.control.lock();
        let pending = match &self.slots.lock().current {
            Some(run) if !run.engine_done() => return Err(OrchestratorError::AlreadyRunning),
            Some(_) => true,
            None => false,
        };
        if pending {
            self.finish();
        }
        match validate_config(config) {
            Ok(c) => self.launch(c, target),
            Err(errors) => Err(OrchestratorError::InvalidConfig(errors)),
        }
    }

    fn launch(
        &self,
        config: ExperimentConfig,
        target: Option<Arc<dyn IngestTarget>>,
    ) -> Result<StatusReport, OrchestratorError> {
        let trace = config.trace.load(config.seed).map_err(|e| {
            OrchestratorError::InvalidConfig(vec![ConfigError::InvalidTrace(e.to_string())])
        })?;
        let dir = self.experiment_dir(&config.experiment_id);
        reset_dir(&dir)?;
        let config_toml = config.to_toml().map_err(|e| {
            OrchestratorError::Rejected(format!("config cannot be serialized: {e}"))
        })?;
        std::fs::write(dir.join(CONFIG_FILE), &config_toml)?;

        let system = Arc::new(ManagedSystem::build(config, Some(&dir))?);
        let control = Arc::new(RunControl::new());
        let (sys, ctl) = (system.clone(), control.clone());
        let handle = std::thread::Builder::new()
            .name(format!("experiment-{}", system.config.experiment_id))
            .spawn(move || engine::run(&sys, &trace, &ctl, target))?;
        let mut slots = self.slots.lock();
        slots.last = None;
        slots.current = Some(Running {
            system,
            control,
            handle: Some(handle),
        });
        Ok(Self::status_of(&slots))
    }

    /// Joins the running engine and computes the summary.
    /// Joins the current engine and records its summary. The caller holds
    /// the control lock.
    fn finish(&self) -> Option<ExperimentSummary> {
        let (handle, sys) = {
            let mut slots = self.slots.lock();
            let run = slots.current.as_mut()?;
            (run.handle.take()?, run.system.clone())
        };
        let result = handle.join().unwrap_or(Err(EngineError::Panicked));
        let records = sys.knowledge.metrics_records().unwrap_or_default();
        let mut summary =
            ExperimentSummary::from_records(sys.config.experiment_id.clone(), &records);
        summary.strategy = Some(sys.config.strategy.kind.clone());
        let error = match &result {
            Ok(outcome) => {
                summary.accepted = Some(outcome.counters.accepted_total);
                summary.dropped = Some(outcome.counters.dropped_total);
                summary.residual_depth = Some(outcome.counters.depth);
                None
            }
            Err(e) => {
                tracing::error!("experiment {} failed: {e}", sys.config.experiment_id);
                Some(e.to_string())
            }
        };
        let mut slots = self.slots.lock();
        slots.current = None;
        slots.last = Some(Finished {
            system: sys,
            summary: summary.clone(),
            error,
        });
        Some(summary)
    }

    /// Stops the running experiment and returns its summary. Once a run is
    /// stopped, further calls return the same summary.
    pub fn stop_experiment(&self, drain: bool) -> Result<ExperimentSummary, OrchestratorError> {
        let _serial = self.control.lock();
        {
            let slots = self.slots.lock();
            if let Some(run) = &slots.current {
                run.control.request_stop(drain);
            } else if let Some(done) = &slots.last {
                return Ok(done.summary.clone());
            } else {
                return Err(OrchestratorError::NotRunning);
            }
        }
        Ok(self.finish().expect("a run was current"))
    }

    /// Blocks until the running experiment completes on its own.
    pub fn wait(&self) -> Result<ExperimentSummary, OrchestratorError> {
        while self
            .slots
            .lock()
            .current
            .as_ref()
            .is_some_and(|r| !r.engine_done())
        {
            std::thread::sleep(std::time::Duration::from_millis(5));
        }
        let _serial = self.control.lock();
        self.finish();
        let slots = self.slots.lock();
        let done = slots.last.as_ref().ok_or(OrchestratorError::NotRunning)?;
        match &done.error {
            Some(e) => Err(OrchestratorError::Rejected(e.clone())),
            None => Ok(done.summary.clone()),
        }
    }

    pub fn status(&self) -> StatusReport {
        Self::status_of(&self.slots.lock())
    }

    fn status_of(slots: &Slots) -> StatusReport {
        let (state, sys, error) = match (&slots.current, &slots.last) {
            (Some(run), _) => {
                let state = if run.handle.is_none() {
                    RunState::Stopping
                } else if run.engine_done() {
                    RunState::Completed
                } else {
                    RunState::Running
                };
                (state, Some(&run.system), None)
            }
            (None, Some(done)) => (RunState::Stopped, Some(&done.system), done.error.clone()),
            (None, None) => (RunState::Idle, None, None),
        };
        let Some(sys) = sys else {
            return StatusReport {
                state,
                experiment_id: None,
                clock_mode: None,
                strategy: None,
                active_model: None,
                models: Vec::new(),
                queue_depth: 0,
                accepted: 0,
                dropped: 0,
                processed: 0,
                switches: 0,
                experiment_time: 0.0,
                error,
            };
        };
        let counters = sys.backlog.counters();
        StatusReport {
            state,
            experiment_id: Some(sys.config.experiment_id.clone()),
            clock_mode: Some(sys.config.clock_mode),
            strategy: Some(sys.knowledge.get_adaptation_rules().kind),
            active_model: Some(sys.repo.active_id().to_string()),
            models: sys.repo.profiles().map(|p| p.id.clone()).collect(),
            queue_depth: counters.depth,
            accepted: counters.accepted_total,
            dropped: counters.dropped_total,
            processed: sys.knowledge.len(IndexName::FinalMetrics),
            switches: sys.repo.swap_count(),
            experiment_time: sys.now(),
            error,
        }
    }

    /// The running experiment, or the last one if none is running.
    fn system(&self) -> Option<Arc<ManagedSystem>> {
        let slots = self.slots.lock();
        slots
            .current
            .as_ref()
            .map(|r| r.system.clone())
            .or_else(|| slots.last.as_ref().map(|d| d.system.clone()))
    }

    fn running_system(&self) -> Result<Arc<ManagedSystem>, OrchestratorError> {
        let slots = self.slots.lock();
        match &slots.current {
            Some(run) if !run.engine_done() => Ok(run.system.clone()),
            _ => Err(OrchestratorError::NotRunning),
        }
    }

    /// Replaces the running experiment's adaptation rules.
    pub fn change_knowledge(&self, spec: StrategySpec) -> Result<(), OrchestratorError> {
        let _serial = self.control.lock();
        let sys = self.running_system()?;
        sys.knowledge.set_adaptation_rules(spec, sys.timestamp())?;
        Ok(())
    }

    /// Accepts one request into the running experiment's backlog.
    pub fn ingest(&self, bytes: Vec<u8>) -> Result<u64, OrchestratorError> {
        let sys = self.running_system()?;
        if sys.config.clock_mode == ClockMode::VirtualTime {
            return Err(OrchestratorError::Rejected(
                "virtual_time experiments take arrivals from their trace only".into(),
            ));
        }
        sys.backlog
            .ingest(Payload::Inline { bytes }, sys.now())
            .map_err(|e| match e {
                IngestError::Dropped => OrchestratorError::Dropped,
                IngestError::NotRunning => OrchestratorError::NotRunning,
                IngestError::Spill(m) => OrchestratorError::Rejected(m),
            })
    }

    /// Newest `n` documents of `index`, newest first. Empty when no
    /// experiment has run.
    pub fn latest(&self, index: IndexName, n: usize) -> Vec<Value> {
        self.system()
            .map(|s| s.knowledge.latest_docs(index, n))
            .unwrap_or_default()
    }

    /// Id of the running or last experiment.
    pub fn current_id(&self) -> Option<String> {
        self.system().map(|s| s.config.experiment_id.clone())
    }

    /// Tar archive of an experiment's indexes and config.
    pub fn export(&self, id: &str) -> Result<Vec<u8>, OrchestratorError> {
        if let Some(sys) = self.system().filter(|s| s.config.experiment_id == id) {
            let config = std::fs::read_to_string(self.experiment_dir(id).join(CONFIG_FILE))?;
            return Ok(sys.knowledge.export_archive(&config)?);
        }
        let dir = self.known_dir(id)?;
        let read = |name: &str| std::fs::read(dir.join(name));
        Ok(build_archive(&[
            (
                IndexName::NewLogs.file_name(),
                read(IndexName::NewLogs.file_name())?,
            ),
            (
                IndexName::FinalMetrics.file_name(),
                read(IndexName::FinalMetrics.file_name())?,
            ),
            (CONFIG_FILE, read(CONFIG_FILE)?),
        ])?)
    }

    fn known_dir(&self, id: &str) -> Result<PathBuf, OrchestratorError> {
        let dir = self.experiment_dir(id);
        if !valid_experiment_id(id) || !dir.join(IndexName::FinalMetrics.file_name()).is_file() {
            return Err(OrchestratorError::UnknownExperiment(id.to_string()));
        }
        Ok(dir)
    }

    /// Summary recomputed from an experiment's stored `final_metrics`.
    pub fn summary(&self, id: &str) -> Result<ExperimentSummary, OrchestratorError> {
        let dir = self.known_dir(id)?;
        let text = std::fs::read_to_string(dir.join(IndexName::FinalMetrics.file_name()))?;
        let records = parse_records(&text)?;
        let mut s = ExperimentSummary::from_records(id, &records);
        if let Ok(cfg) = std::fs::read_to_string(dir.join(CONFIG_FILE)) {
            s.strategy = ExperimentConfig::from_toml(&cfg)
                .ok()
                .map(|c| c.strategy.kind);
        }
        Ok(s)
    }

    pub fn compare(&self, ids: &[String]) -> Result<ComparisonTable, OrchestratorError> {
        let summaries = ids
            .iter()
            .map(|id| self.summary(id))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ComparisonTable::new(&summaries))
    }
}

impl Drop for Orchestrator {
    fn drop(&mut self) {
        let _serial = self.control.lock();
        if let Some(run) = &self.slots.lock().current {
            run.control.request_stop(false);
        }
        self.finish();
    }
}

/// Parses a `final_metrics` file, ignoring a torn last line.
pub fn parse_records(text: &str) -> Result<Vec<MetricsRecord>, KnowledgeError> {
    let mut out = Vec::new();
    let mut lines = text.split_inclusive('\n').peekable();
    while let Some(line) = lines.next() {
        let complete = line.ends_with('\n');
        match serde_json::from_str(line.trim_end()) {
            Ok(r) => out.push(r),
            Err(_) if !complete && lines.peek().is_none() => break,
            Err(e) => return Err(KnowledgeError::Corrupt(e.to_string())),
        }
    }
    Ok(out)
}

/// Empties the experiment directory, keeping anything that is not ours.
fn reset_dir(dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for name in [
        IndexName::NewLogs.file_name(),
        IndexName::FinalMetrics.file_name(),
        CONFIG_FILE,
    ] {
        match std::fs::remove_file(dir.join(name)) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e),
            _ => {}
        }
    }
    match std::fs::remove_dir_all(dir.join("spill")) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(e),
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loadgen::{SynthSpec, TraceSpec};

    fn config(id: &str, count: usize) -> ExperimentConfig {
        let mut c = ExperimentConfig::new(
            id,
            TraceSpec::Synthetic {
                synth: SynthSpec::Poisson { rate: 10.0 },
                count,
                seed: None,
            },
        );
        c.strategy = StrategySpec::naive();
        c
    }

    #[test]
    fn lifecycle_and_idempotent_stop() {
        let dir = tempfile::tempdir().unwrap();
        let o = Orchestrator::new(dir.path());
        assert!(matches!(
            o.stop_experiment(true),
            Err(OrchestratorError::NotRunning)
        ));
        assert_eq!(o.status().state, RunState::Idle);
        let st = o.start_experiment(config("e1", 200)).unwrap();
        assert_eq!(st.models.len(), 5);
        let first = o.wait().unwrap();
        assert_eq!(first.total_processed, 200);
        assert_eq!(first.residual_depth, Some(0));
        assert_eq!(o.stop_experiment(true).unwrap(), first);
        assert_eq!(o.stop_experiment(false).unwrap(), first);
        assert_eq!(o.status().state, RunState::Stopped);
        assert_eq!(o.summary("e1").unwrap().total_processed, 200);
    }

    #[test]
    fn invalid_config_starts_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let o = Orchestrator::new(dir.path());
        let mut c = config("bad", 10);
        c.strategy = StrategySpec::new("greedy");
        c.target_response_time = 0.0;
        match o.start_experiment(c) {
            Err(OrchestratorError::InvalidConfig(errors)) => assert_eq!(errors.len(), 2),
            other => panic!("{:?}", other.map(|_| ())),
        }
        assert_eq!(o.status().state, RunState::Idle);
        assert!(!dir.path().join("bad").exists());
        let c = config("../escape", 10);
        assert!(matches!(
            o.start_experiment(c),
            Err(OrchestratorError::InvalidConfig(_))
        ));
    }

    #[test]
    fn second_start_while_running() {
        let dir = tempfile::tempdir().unwrap();
        let o = Orchestrator::new(dir.path());
        let mut c = config("rt", 1000);
        c.clock_mode = ClockMode::RealTime;
        o.start_experiment(c).unwrap();
        assert!(matches!(
            o.start_experiment(config("other", 10)),
            Err(OrchestratorError::AlreadyRunning)
        ));
        o.change_knowledge(StrategySpec::single("m")).unwrap();
        assert!(matches!(
            o.change_knowledge(StrategySpec::single("zz")),
            Err(OrchestratorError::Knowledge(KnowledgeError::InvalidSpec(_)))
        ));
        o.ingest(b"img".to_vec()).unwrap();
        let s = o.stop_experiment(false).unwrap();
        assert!(s.accepted.unwrap() >= 1);
        assert!(matches!(
            o.ingest(vec![1]),
            Err(OrchestratorError::NotRunning)
        ));
    }

    #[test]
    fn export_live_equals_export_from_disk() {
        let dir = tempfile::tempdir().unwrap();
        let o = Orchestrator::new(dir.path());
        o.start_experiment(config("e", 50)).unwrap();
        o.wait().unwrap();
        let live = o.export("e").unwrap();
        let fresh = Orchestrator::new(dir.path());
        assert_eq!(fresh.export("e").unwrap(), live);
        assert!(matches!(
            fresh.export("nope"),
            Err(OrchestratorError::UnknownExperiment(_))
        ));
        let table = fresh.compare(&["e".to_string()]).unwrap();
        assert_eq!(table.columns, vec!["e"]);
        assert_eq!(table.rows[0].values, vec![50.0]);
    }

    #[test]
    fn torn_last_record_ignored() {
        let good = r#"{"log_id":1,"timestamp":1.0,"request_no":1,"request_id":1,"model_name":"n","model_generation":0,"model_processing_time":0.01,"total_time":0.01,"absolute_time":1.0,"arrival_time":0.99,"start_time":0.99,"finish_time":1.0,"utility":0.6,"kept_count":1,"avg_confidence":0.6,"queue_depth_at_start":0}"#;
        let text = format!("{good}\n{{\"log_id\":2,\"time");
        assert_eq!(parse_records(&text).unwrap().len(), 1);
        assert!(parse_records(&format!("garbage\n{good}\n")).is_err());
    }
}
