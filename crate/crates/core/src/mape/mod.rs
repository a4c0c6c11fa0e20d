//! The adaptation loop: Monitor, Analyze, Plan, Execute over the knowledge
//! store.

pub mod analyze;
mod control;
pub mod strategy;

use serde_json::json;

use crate::domain::StrategyDecision;
use crate::knowledge::{IndexName, Knowledge};
use crate::runtime::{Repository, RuntimeError, SwitchOutcome};

pub use analyze::{analyze, monitor, AnalysisReport, ModelPrediction, MonitoredSnapshot};
pub use control::{MapeLoop, TickReport};
pub use strategy::{
    adamls_select, naive_select, Band, BandTable, Strategy, StrategyError, DEFAULT_LOOKAHEAD,
};

#[derive(Debug, thiserror::Error)]
pub enum MapeError {
    #[error("knowledge unavailable: {0}")]
    KnowledgeUnavailable(String),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

/// Picks the model for the next period. `None` means the strategy has no
/// opinion this tick (external strategies decide in the loop itself).
pub fn plan(
    report: &AnalysisReport,
    strategy: &Strategy,
    snapshot: &MonitoredSnapshot,
    target: f64,
    now: f64,
) -> Option<StrategyDecision> {
    let (model_id, reason) = match strategy {
        Strategy::Single { model } => (model.clone(), format!("single: fixed model {model}")),
        Strategy::Naive { bands, .. } => {
            let band = bands.band_for(snapshot.arrival_rate);
            (
                band.model.clone(),
                format!(
                    "{}: rate {:.2}/s in {}",
                    strategy.kind(),
                    snapshot.arrival_rate,
                    band
                ),
            )
        }
        Strategy::AdaMls { target: own, .. } => {
            let target = own.unwrap_or(target);
            let chosen = adamls_select(report, target).to_string();
            let p = report.prediction(&chosen);
            let reason = match p {
                Some(p) if p.response_time <= target => format!(
                    "adamls: {chosen} predicted {:.3}s <= {target}s, confidence {:.3}",
                    p.response_time, p.confidence
                ),
                Some(p) => format!(
                    "adamls: no model meets {target}s, fastest {chosen} predicted {:.3}s",
                    p.response_time
                ),
                None => format!("adamls: no predictions, keeping {chosen}"),
            };
            (chosen, reason)
        }
        Strategy::External { .. } => return None,
    };
    Some(StrategyDecision {
        model_id,
        reason,
        decided_at: now,
    })
}

/// Applies a decision. Nothing happens, and nothing is logged, if the
/// decided model is already active.
pub fn execute(
    decision: &StrategyDecision,
    strategy_kind: &str,
    repo: &Repository,
    knowledge: &Knowledge,
    timestamp: f64,
    host_timing: bool,
) -> Result<Option<SwitchOutcome>, MapeError> {
    let target = repo
        .get(&decision.model_id)
        .ok_or_else(|| RuntimeError::UnknownModel(decision.model_id.clone()))?;
    if target.id() == repo.active_id() {
        return Ok(None);
    }
    let outcome = repo.apply_switch(&decision.model_id)?;
    let mut event = json!({
        "timestamp": timestamp,
        "event": "switch",
        "from": outcome.from,
        "to": outcome.to,
        "generation": outcome.generation,
        "strategy": strategy_kind,
        "reason": decision.reason,
    });
    if host_timing {
        event["swap_latency"] = json!(outcome.latency.as_secs_f64());
    }
    let logged = knowledge.append(IndexName::NewLogs, event);
    if let Err(e) = logged {
        tracing::warn!("switch to {} not logged: {e}", outcome.to);
    }
    Ok(Some(outcome))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{default_profiles, KnowledgeState, StrategySpec};

    fn snap(rate: f64, depth: usize) -> MonitoredSnapshot {
        MonitoredSnapshot {
            at: 1.0,
            arrival_rate: rate,
            queue_depth: depth,
            active_model: "n".into(),
            recent_samples: 0,
            recent_total_time: None,
            recent_processing_time: None,
            recent_confidence: None,
        }
    }

    #[test]
    fn plan_per_strategy() {
        let profiles = default_profiles();
        let state = KnowledgeState::new(["n", "s", "m", "l", "x"], StrategySpec::naive());
        let s = snap(20.0, 0);
        let report = analyze(&s, &state, &profiles, 0.5, 0.0);
        let naive = Strategy::from_spec(&StrategySpec::naive(), &profiles).unwrap();
        assert_eq!(plan(&report, &naive, &s, 0.5, 1.0).unwrap().model_id, "n");
        let single = Strategy::from_spec(&StrategySpec::single("l"), &profiles).unwrap();
        assert_eq!(plan(&report, &single, &s, 0.5, 1.0).unwrap().model_id, "l");
        let ada = Strategy::from_spec(&StrategySpec::adamls(), &profiles).unwrap();
        // empty queue: every model meets 0.5s, x is the most confident
        assert_eq!(plan(&report, &ada, &s, 0.5, 1.0).unwrap().model_id, "x");
        let ext = Strategy::from_spec(&StrategySpec::external("/nonexistent"), &profiles).unwrap();
        assert!(plan(&report, &ext, &s, 0.5, 1.0).is_none());
    }

    #[test]
    fn execute_switches_and_logs_once() {
        let repo = Repository::preload(default_profiles(), "n").unwrap();
        let k = Knowledge::in_memory(KnowledgeState::new(["n", "x"], StrategySpec::naive()));
        let d = StrategyDecision {
            model_id: "yolov5xu".into(),
            reason: "test".into(),
            decided_at: 1.0,
        };
        let out = execute(&d, "naive", &repo, &k, 1.0, true).unwrap().unwrap();
        assert_eq!((out.from.as_str(), out.to.as_str()), ("n", "x"));
        assert!(execute(&d, "naive", &repo, &k, 2.0, true)
            .unwrap()
            .is_none());
        let logs = k.docs(IndexName::NewLogs);
        assert_eq!(logs.len(), 1);
        assert_eq!(logs[0]["event"], "switch");
        assert_eq!(logs[0]["generation"], 1);
        assert!(logs[0]["swap_latency"].is_number());
        let bad = StrategyDecision {
            model_id: "q".into(),
            ..d
        };
        assert!(matches!(
            execute(&bad, "naive", &repo, &k, 3.0, true),
            Err(MapeError::Runtime(RuntimeError::UnknownModel(_)))
        ));
    }
}
