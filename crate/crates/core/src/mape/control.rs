use std::sync::Arc;
use std::time::Duration;

use serde_json::json;

use crate::clock::{Clock, StopSignal};
use crate::domain::StrategyDecision;
use crate::ingestion::Backlog;
use crate::knowledge::{IndexName, Knowledge};
use crate::runtime::{poll_switch_signal, Repository, SwitchOutcome};

use super::analyze::{analyze, monitor, MonitoredSnapshot};
use super::strategy::Strategy;
use super::{execute, plan, MapeError};

#[derive(Debug, Clone)]
pub struct TickReport {
    pub snapshot: MonitoredSnapshot,
    pub decision: Option<StrategyDecision>,
    pub switched: Option<SwitchOutcome>,
}

/// One adaptation loop over a managed system. The strategy is re-read from
/// the knowledge store on every tick, so rule changes apply from the next
/// tick on.
pub struct MapeLoop {
    repo: Arc<Repository>,
    knowledge: Arc<Knowledge>,
    backlog: Arc<Backlog>,
    target: f64,
    window: f64,
    epoch: f64,
    ticks: u64,
    last_kind: Option<&'static str>,
    last_signal: Option<String>,
    host_timing: bool,
}

impl MapeLoop {
    pub fn new(
        repo: Arc<Repository>,
        knowledge: Arc<Knowledge>,
        backlog: Arc<Backlog>,
        target: f64,
        window: f64,
        epoch: f64,
    ) -> Self {
        Self {
            repo,
            knowledge,
            backlog,
            target,
            window,
            epoch,
            ticks: 0,
            last_kind: None,
            last_signal: None,
            host_timing: true,
        }
    }

    /// Whether switch events carry the measured swap latency. Off for
    /// virtual-time runs, whose logs must not depend on the host.
    pub fn with_host_timing(mut self, on: bool) -> Self {
        self.host_timing = on;
        self
    }

    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    fn strategy(&self) -> Result<Strategy, MapeError> {
        let profiles: Vec<_> = self.repo.profiles().cloned().collect();
        Ok(Strategy::from_spec(
            &self.knowledge.get_adaptation_rules(),
            &profiles,
        )?)
    }

    /// Seconds until the next tick: the external poll period if one is set,
    /// else `default`.
    pub fn period(&self, default: f64) -> f64 {
        match self.strategy() {
            Ok(Strategy::External {
                poll_period: Some(p),
                ..
            }) => p,
            _ => default,
        }
    }

    pub fn tick(&mut self, now: f64) -> Result<TickReport, MapeError> {
        self.ticks += 1;
        let strategy = self.strategy()?;
        let kind = strategy.kind();
        if self.last_kind != Some(kind) {
            // a newly selected external strategy honours the file as it is
            self.last_signal = None;
            self.last_kind = Some(kind);
        }
        let snapshot = monitor(
            &self.knowledge,
            &self.backlog,
            self.repo.active_id(),
            self.window,
            now,
        )?;
        self.knowledge.set_arrival_rate(snapshot.arrival_rate);
        let timestamp = self.epoch + now;

        let (decision, needs_adaptation) = match &strategy {
            Strategy::External { path, .. } => {
                let Some(token) = poll_switch_signal(path, self.last_signal.as_deref()) else {
                    return Ok(TickReport {
                        snapshot,
                        decision: None,
                        switched: None,
                    });
                };
                self.last_signal = Some(token.clone());
                if self.repo.get(&token).is_none() {
                    tracing::warn!("switch file names unknown model {token:?}");
                    self.log(json!({
                        "timestamp": timestamp,
                        "event": "switch_rejected",
                        "strategy": kind,
                        "model": token,
                        "reason": "unknown model",
                    }));
                    return Ok(TickReport {
                        snapshot,
                        decision: None,
                        switched: None,
                    });
                }
                let decision = StrategyDecision {
                    model_id: self.repo.get(&token).expect("checked").id().to_string(),
                    reason: format!("external: switch file requests {token}"),
                    decided_at: now,
                };
                (decision, true)
            }
            _ => {
                let lookahead = match &strategy {
                    Strategy::AdaMls { lookahead, .. } => *lookahead,
                    _ => 0.0,
                };
                let state = self.knowledge.state();
                let report = analyze(
                    &snapshot,
                    &state,
                    self.repo.profiles(),
                    self.target,
                    lookahead,
                );
                let decision = plan(&report, &strategy, &snapshot, self.target, now)
                    .expect("internal strategies decide");
                (decision, report.needs_adaptation)
            }
        };

        self.log(json!({
            "timestamp": timestamp,
            "event": "decision",
            "tick": self.ticks,
            "strategy": kind,
            "model": decision.model_id,
            "reason": decision.reason,
            "arrival_rate": snapshot.arrival_rate,
            "queue_depth": snapshot.queue_depth,
            "needs_adaptation": needs_adaptation,
        }));
        let switched = execute(
            &decision,
            kind,
            &self.repo,
            &self.knowledge,
            timestamp,
            self.host_timing,
        )?;
        Ok(TickReport {
            snapshot,
            decision: Some(decision),
            switched,
        })
    }

    fn log(&self, doc: serde_json::Value) {
        if let Err(e) = self.knowledge.append(IndexName::NewLogs, doc) {
            tracing::warn!("control-plane log lost: {e}");
        }
    }

    /// Ticks every `period` seconds of `clock` until `stop` is set. Returns
    /// the number of ticks run. Ticks that fall behind are skipped, not
    /// replayed.
    pub fn run(&mut self, clock: &dyn Clock, period: f64, stop: &StopSignal) -> u64 {
        let start = self.ticks;
        let mut next = clock.now() + self.period(period);
        loop {
            let wait = (next - clock.now()).max(0.0);
            if stop.wait_timeout(Duration::from_secs_f64(wait)) {
                break;
            }
            let now = clock.now();
            if now < next {
                continue;
            }
            if let Err(e) = self.tick(now) {
                tracing::warn!("adaptation tick failed: {e}");
            }
            let p = self.period(period);
            next += p;
            if next <= now {
                next = now + p;
            }
        }
        self.ticks - start
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::WallClock;
    use crate::domain::{default_profiles, KnowledgeState, Payload, StrategySpec};
    use crate::runtime::write_switch_signal;

    fn setup(rules: StrategySpec) -> (Arc<Repository>, Arc<Knowledge>, Arc<Backlog>) {
        let repo = Arc::new(Repository::preload(default_profiles(), "n").unwrap());
        let k = Arc::new(Knowledge::in_memory(KnowledgeState::new(
            ["n", "s", "m", "l", "x"],
            rules,
        )));
        (repo, k, Arc::new(Backlog::new(None)))
    }

    #[test]
    fn naive_tick_follows_rate() {
        let (repo, k, backlog) = setup(StrategySpec::naive());
        let mut l = MapeLoop::new(repo.clone(), k.clone(), backlog.clone(), 0.5, 1.0, 0.0);
        let r = l.tick(1.0).unwrap();
        assert_eq!(r.decision.unwrap().model_id, "x");
        assert_eq!(repo.active_id(), "x");
        for i in 0..20 {
            backlog
                .ingest(Payload::Synthetic { len: 1 }, 1.0 + (i + 1) as f64 * 0.04)
                .unwrap();
        }
        let r = l.tick(2.0).unwrap();
        assert_eq!(r.snapshot.arrival_rate, 20.0);
        assert_eq!(repo.active_id(), "n");
        let events: Vec<_> = k
            .docs(IndexName::NewLogs)
            .iter()
            .map(|d| d["event"].as_str().unwrap().to_string())
            .collect();
        assert_eq!(events, ["decision", "switch", "decision", "switch"]);
    }

    #[test]
    fn rules_change_takes_effect_next_tick() {
        let (repo, k, backlog) = setup(StrategySpec::naive());
        let mut l = MapeLoop::new(repo.clone(), k.clone(), backlog, 0.5, 1.0, 0.0);
        l.tick(1.0).unwrap();
        k.set_adaptation_rules(StrategySpec::single("m"), 1.5)
            .unwrap();
        l.tick(2.0).unwrap();
        assert_eq!(repo.active_id(), "m");
    }

    #[test]
    fn external_file_drives_switches() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.csv");
        let (repo, k, backlog) = setup(StrategySpec::external(&path));
        let mut l = MapeLoop::new(repo.clone(), k.clone(), backlog, 0.5, 1.0, 0.0);
        assert!(l.tick(1.0).unwrap().decision.is_none());
        write_switch_signal(&path, "yolov5lu").unwrap();
        assert!(l.tick(2.0).unwrap().switched.is_some());
        assert_eq!(repo.active_id(), "l");
        // unchanged file: no new decision
        assert!(l.tick(3.0).unwrap().decision.is_none());
        write_switch_signal(&path, "bogus").unwrap();
        assert!(l.tick(4.0).unwrap().switched.is_none());
        assert_eq!(repo.active_id(), "l");
        let last = k.latest_docs(IndexName::NewLogs, 1);
        assert_eq!(last[0]["event"], "switch_rejected");
    }

    #[test]
    fn real_time_loop_ticks_and_stops() {
        let (repo, k, backlog) = setup(StrategySpec::single("s"));
        let stop = Arc::new(StopSignal::new());
        let s = stop.clone();
        let r = repo.clone();
        let h = std::thread::spawn(move || {
            let clock = WallClock::start();
            let mut l = MapeLoop::new(r, k, backlog, 0.5, 0.02, 0.0);
            l.run(&clock, 0.02, &s)
        });
        std::thread::sleep(Duration::from_millis(150));
        stop.trigger();
        let ticks = h.join().unwrap();
        assert!(ticks >= 2, "{ticks} ticks");
        assert_eq!(repo.active_id(), "s");
    }
}
