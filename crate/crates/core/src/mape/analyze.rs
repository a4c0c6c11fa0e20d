//! Monitor and Analyze.

use serde::Serialize;

use crate::domain::{KnowledgeState, ModelProfile};
use crate::ingestion::Backlog;
use crate::knowledge::{IndexName, Knowledge, KnowledgeError};

use super::MapeError;

/// Recent metrics are averaged over at most this many records.
pub const RECENT_CAP: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonitoredSnapshot {
    pub at: f64,
    /// Arrivals per second over the trailing monitor window.
    pub arrival_rate: f64,
    pub queue_depth: usize,
    pub active_model: String,
    pub recent_samples: usize,
    pub recent_total_time: Option<f64>,
    pub recent_processing_time: Option<f64>,
    pub recent_confidence: Option<f64>,
}

pub fn monitor(
    knowledge: &Knowledge,
    backlog: &Backlog,
    active_model: &str,
    window: f64,
    now: f64,
) -> Result<MonitoredSnapshot, MapeError> {
    let arrivals = backlog.arrivals_between(now - window, now);
    let mut snap = MonitoredSnapshot {
        at: now,
        arrival_rate: arrivals as f64 / window,
        queue_depth: backlog.queue_depth(),
        active_model: active_model.to_string(),
        recent_samples: 0,
        recent_total_time: None,
        recent_processing_time: None,
        recent_confidence: None,
    };
    let n = arrivals.min(RECENT_CAP);
    if n == 0 {
        return Ok(snap);
    }
    match knowledge.fetch_latest(
        IndexName::FinalMetrics,
        &["total_time", "model_processing_time", "avg_confidence"],
        n,
    ) {
        Ok(means) => {
            snap.recent_samples = means["total_time"].sample_count;
            snap.recent_total_time = Some(means["total_time"].mean);
            snap.recent_processing_time = Some(means["model_processing_time"].mean);
            snap.recent_confidence = Some(means["avg_confidence"].mean);
        }
        // nothing processed yet
        Err(KnowledgeError::NoNumericField(_)) => {}
        Err(e) => return Err(MapeError::KnowledgeUnavailable(e.to_string())),
    }
    Ok(snap)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelPrediction {
    pub model_id: String,
    /// Expected service time of one request.
    pub latency: f64,
    /// Expected response time of a request arriving now.
    pub response_time: f64,
    pub confidence: f64,
    /// Whether the figures come from observations rather than the profile.
    pub observed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub needs_adaptation: bool,
    pub predictions: Vec<ModelPrediction>,
    pub active_model: String,
    /// The active model is predicted to miss the target.
    pub target_missed: bool,
    /// A more confident model is predicted to meet the target.
    pub headroom_available: bool,
}

impl AnalysisReport {
    pub fn prediction(&self, model_id: &str) -> Option<&ModelPrediction> {
        self.predictions.iter().find(|p| p.model_id == model_id)
    }
}

/// Predicts each model's response time as `(depth + 1) * latency`, where
/// latency is the learned mean (profile mean until observed).
///
/// With `lookahead > 0`, a model that cannot keep up with the measured
/// arrival rate is charged for the backlog it would add over that many
/// seconds: `depth + (rate - 1/latency) * lookahead`.
pub fn analyze<'a>(
    snapshot: &MonitoredSnapshot,
    state: &KnowledgeState,
    profiles: impl IntoIterator<Item = &'a ModelProfile>,
    target: f64,
    lookahead: f64,
) -> AnalysisReport {
    let depth = snapshot.queue_depth as f64;
    let predictions: Vec<ModelPrediction> = profiles
        .into_iter()
        .map(|p| {
            let stats = state.models.get(&p.id).filter(|s| s.samples > 0);
            let latency = stats.map_or(p.latency_mean, |s| s.latency_mean);
            let confidence = stats
                .filter(|s| s.has_confidence())
                .map_or(p.confidence_mean, |s| s.confidence_mean);
            let growth = (snapshot.arrival_rate - 1.0 / latency) * lookahead;
            let effective_depth = depth + growth.max(0.0);
            ModelPrediction {
                model_id: p.id.clone(),
                latency,
                response_time: (effective_depth + 1.0) * latency,
                confidence,
                observed: stats.is_some(),
            }
        })
        .collect();
    let active = predictions
        .iter()
        .find(|p| p.model_id == snapshot.active_model);
    let target_missed = active.is_some_and(|a| a.response_time > target);
    let headroom_available = active.is_some_and(|a| {
        predictions
            .iter()
            .any(|p| p.confidence > a.confidence && p.response_time <= target)
    });
    AnalysisReport {
        needs_adaptation: target_missed || headroom_available,
        predictions,
        active_model: snapshot.active_model.clone(),
        target_missed,
        headroom_available,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{default_profiles, MetricsRecord, Payload, StrategySpec};

    fn snapshot(depth: usize, rate: f64, active: &str) -> MonitoredSnapshot {
        MonitoredSnapshot {
            at: 0.0,
            arrival_rate: rate,
            queue_depth: depth,
            active_model: active.into(),
            recent_samples: 0,
            recent_total_time: None,
            recent_processing_time: None,
            recent_confidence: None,
        }
    }

    fn state() -> KnowledgeState {
        KnowledgeState::new(["n", "s", "m", "l", "x"], StrategySpec::adamls())
    }

    #[test]
    fn queue_aware_prediction() {
        let r = analyze(
            &snapshot(3, 0.0, "n"),
            &state(),
            &default_profiles(),
            0.5,
            0.0,
        );
        let x = r.prediction("x").unwrap();
        assert!((x.response_time - 4.0 * 0.110).abs() < 1e-12);
        assert!(!x.observed);
        // x at 0.44 meets 0.5 and is the most confident: headroom from n
        assert!(r.headroom_available && !r.target_missed && r.needs_adaptation);
    }

    #[test]
    fn target_missed_when_backlogged() {
        let r = analyze(
            &snapshot(10, 0.0, "x"),
            &state(),
            &default_profiles(),
            0.5,
            0.0,
        );
        assert!(r.target_missed);
    }

    #[test]
    fn lookahead_charges_overloaded_models_only() {
        let profiles = default_profiles();
        let r = analyze(&snapshot(0, 25.0, "n"), &state(), &profiles, 0.5, 1.0);
        // n serves 66/s: no growth
        assert!((r.prediction("n").unwrap().response_time - 0.015).abs() < 1e-12);
        // x serves ~9.1/s: (25 - 1/0.11) more queued after 1 s
        let expect = (25.0 - 1.0 / 0.110 + 1.0) * 0.110;
        assert!((r.prediction("x").unwrap().response_time - expect).abs() < 1e-12);
    }

    #[test]
    fn observations_override_profile() {
        let k = Knowledge::in_memory(state());
        let rec = MetricsRecord {
            log_id: 0,
            timestamp: 1.0,
            request_no: 1,
            request_id: 1,
            model_name: "x".into(),
            model_generation: 0,
            model_processing_time: 0.3,
            total_time: 0.3,
            absolute_time: 1.0,
            arrival_time: 0.7,
            start_time: 0.7,
            finish_time: 1.0,
            utility: 0.5,
            kept_count: 2,
            avg_confidence: 0.5,
            queue_depth_at_start: 0,
            cpu_load: None,
        };
        k.append_metrics(&rec).unwrap();
        let r = analyze(
            &snapshot(0, 0.0, "x"),
            &k.state(),
            &default_profiles(),
            0.5,
            0.0,
        );
        let x = r.prediction("x").unwrap();
        assert!(x.observed);
        assert_eq!((x.latency, x.confidence), (0.3, 0.5));

        let backlog = Backlog::new(None);
        backlog.ingest(Payload::Synthetic { len: 1 }, 0.9).unwrap();
        let snap = monitor(&k, &backlog, "x", 1.0, 1.0).unwrap();
        assert_eq!(snap.arrival_rate, 1.0);
        assert_eq!(snap.queue_depth, 1);
        assert_eq!(snap.recent_total_time, Some(0.3));
    }

    #[test]
    fn monitor_on_empty_knowledge() {
        let k = Knowledge::in_memory(state());
        let backlog = Backlog::new(None);
        backlog.ingest(Payload::Synthetic { len: 1 }, 0.5).unwrap();
        let snap = monitor(&k, &backlog, "n", 2.0, 1.0).unwrap();
        assert_eq!(snap.arrival_rate, 0.5);
        assert_eq!(snap.recent_samples, 0);
        assert_eq!(snap.recent_total_time, None);
    }
}
