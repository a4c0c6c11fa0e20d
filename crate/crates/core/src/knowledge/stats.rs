//! Time-decayed per-model statistics.
//!
//! Each update first scales the accumulated weight by
//! `exp(-dt * ln 2 / half_life)` and then folds the new sample in with unit
//! weight, so the means are weight-normalised: an infinite half-life gives
//! the plain arithmetic mean and a short one tracks the newest samples.

use crate::domain::{KnowledgeState, MetricsRecord, ModelStats};

use super::KnowledgeError;

pub const DEFAULT_HALF_LIFE: f64 = 30.0;

fn decay(dt: f64, half_life: f64) -> f64 {
    if dt <= 0.0 || half_life.is_infinite() {
        1.0
    } else if half_life <= 0.0 {
        0.0
    } else {
        (-dt * std::f64::consts::LN_2 / half_life).exp()
    }
}

impl ModelStats {
    /// Folds one observation into the running estimates.
    pub fn observe(&mut self, at: f64, latency: f64, confidence: Option<f64>, half_life: f64) {
        let d = if self.samples == 0 {
            0.0
        } else {
            decay(at - self.last_seen, half_life)
        };

        // weighted Welford with all previous weights scaled by d
        let w = d * self.latency_weight + 1.0;
        let delta = latency - self.latency_mean;
        let mean = self.latency_mean + delta / w;
        self.latency_m2 = d * self.latency_m2 + delta * (latency - mean);
        self.latency_mean = mean;
        self.latency_weight = w;
        self.latency_var = if w > 0.0 { self.latency_m2 / w } else { 0.0 };

        if let Some(c) = confidence {
            let cw = d * self.confidence_weight + 1.0;
            self.confidence_mean += (c - self.confidence_mean) / cw;
            self.confidence_weight = cw;
        } else {
            self.confidence_weight *= d;
        }

        self.samples += 1;
        self.last_seen = self.last_seen.max(at);
    }

    /// Whether any request with kept detections has been observed.
    pub fn has_confidence(&self) -> bool {
        self.confidence_weight > 0.0
    }
}

/// Updates the stats of `record.model_name` in place.
///
/// Only requests that kept at least one detection contribute to the
/// confidence estimate; every request contributes to latency.
pub fn update_model_stats(
    state: &mut KnowledgeState,
    record: &MetricsRecord,
    half_life: f64,
) -> Result<(), KnowledgeError> {
    let stats = state
        .models
        .get_mut(&record.model_name)
        .ok_or_else(|| KnowledgeError::UnknownModel(record.model_name.clone()))?;
    let confidence = (record.kept_count > 0).then_some(record.avg_confidence);
    stats.observe(
        record.timestamp,
        record.model_processing_time,
        confidence,
        half_life,
    );
    Ok(())
}
