//! Simulated inference, post-processing and the per-request utility.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::domain::{ClassFilter, Detection, DetectionResult};

use super::repository::PreparedModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDetections {
    pub entries: Vec<Detection>,
    pub sampled_latency: f64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Generator for one (seed, request, model) triple. Same triple, same stream,
/// independent of how many other requests were served before.
pub fn request_rng(seed: u64, request_id: u64, model_id: &str) -> ChaCha8Rng {
    let key = splitmix64(seed ^ splitmix64(request_id ^ splitmix64(fnv1a(model_id.as_bytes()))));
    ChaCha8Rng::seed_from_u64(key)
}

/// Draws one simulated inference outcome.
///
/// Latency is log-normal with the profile's mean and coefficient of
/// variation, the detection count is Poisson, confidences are normal clamped
/// to [0, 1] and class ids are uniform over `0..class_universe`. Zero
/// dispersion parameters yield the profile means exactly.
pub fn infer<R: Rng + ?Sized>(
    model: &PreparedModel,
    rng: &mut R,
    class_universe: u32,
) -> RawDetections {
    let p = &model.profile;
    let sampled_latency = match &model.latency {
        Some(d) => d.sample(rng),
        None => p.latency_mean,
    };
    let count = match &model.detections {
        Some(d) => d.sample(rng) as usize,
        None => p.detections_mean.round() as usize,
    };
    let universe = class_universe.max(1);
    let entries = (0..count)
        .map(|_| {
            let confidence = match &model.confidence {
                Some(d) => d.sample(rng),
                None => p.confidence_mean,
            }
            .clamp(0.0, 1.0);
            Detection {
                class_id: rng.random_range(0..universe),
                confidence,
            }
        })
        .collect();
    RawDetections {
        entries,
        sampled_latency,
    }
}

/// Keeps detections at or above `threshold` whose class passes `classes`.
pub fn postprocess(raw: &RawDetections, threshold: f64, classes: &ClassFilter) -> DetectionResult {
    let kept: Vec<Detection> = raw
        .entries
        .iter()
        .filter(|d| d.confidence >= threshold && classes.admits(d.class_id))
        .copied()
        .collect();
    let avg_confidence = if kept.is_empty() {
        0.0
    } else {
        kept.iter().map(|d| d.confidence).sum::<f64>() / kept.len() as f64
    };
    DetectionResult {
        raw: raw.entries.clone(),
        kept_count: kept.len(),
        kept,
        avg_confidence,
    }
}

/// `confidence * min(1, target / total_time)`: full credit while the target
/// is met, scaled down proportionally once it is missed.
pub fn compute_utility(total_time: f64, avg_confidence: f64, target: f64) -> f64 {
    let timeliness = if total_time <= target {
        1.0
    } else {
        target / total_time
    };
    avg_confidence * timeliness
}
