use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand_distr::{LogNormal, Normal, Poisson};

use crate::domain::ModelProfile;

use super::RuntimeError;

/// A profile with its sampling distributions built and ready.
#[derive(Debug, Clone)]
pub struct PreparedModel {
    pub profile: ModelProfile,
    pub(crate) latency: Option<LogNormal<f64>>,
    pub(crate) detections: Option<Poisson<f64>>,
    pub(crate) confidence: Option<Normal<f64>>,
}

impl PreparedModel {
    pub fn prepare(profile: ModelProfile) -> Result<Self, RuntimeError> {
        let bad = |what: &str| RuntimeError::InvalidProfile {
            id: profile.id.clone(),
            reason: what.to_string(),
        };
        let latency = if profile.latency_cv > 0.0 {
            Some(
                LogNormal::from_mean_cv(profile.latency_mean, profile.latency_cv)
                    .map_err(|_| bad("latency"))?,
            )
        } else {
            None
        };
        let detections = if profile.detections_mean > 0.0 {
            Some(Poisson::new(profile.detections_mean).map_err(|_| bad("detections_mean"))?)
        } else {
            None
        };
        let confidence = if profile.confidence_sd > 0.0 {
            Some(
                Normal::new(profile.confidence_mean, profile.confidence_sd)
                    .map_err(|_| bad("confidence"))?,
            )
        } else {
            None
        };
        if !(profile.latency_mean > 0.0) {
            return Err(bad("latency_mean must be > 0"));
        }
        Ok(Self {
            profile,
            latency,
            detections,
            confidence,
        })
    }

    pub fn id(&self) -> &str {
        &self.profile.id
    }
}

/// Snapshot of the active-model cell.
#[derive(Debug, Clone)]
pub struct ActiveModel {
    pub index: usize,
    /// Number of completed `apply_switch` calls when this was read.
    pub generation: u64,
    pub model: Arc<PreparedModel>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwitchOutcome {
    pub from: String,
    pub to: String,
    pub generation: u64,
    pub latency: Duration,
}

/// Low bits of the cell hold the profile index, high bits the generation.
const INDEX_BITS: u32 = 16;
const INDEX_MASK: u64 = (1 << INDEX_BITS) - 1;

fn pack(generation: u64, index: usize) -> u64 {
    (generation << INDEX_BITS) | index as u64
}

/// All models, preloaded once, plus the atomically swappable active cell.
///
/// Reads of the active model are a single atomic load. A switch changes
/// which model the *next* `active()` call returns; a request that already
/// read the cell keeps its model until it finishes.
#[derive(Debug)]
pub struct Repository {
    models: Vec<Arc<PreparedModel>>,
    cell: AtomicU64,
    preload_times: Vec<Duration>,
}

impl Repository {
    pub fn preload(profiles: Vec<ModelProfile>, initial: &str) -> Result<Self, RuntimeError> {
        if profiles.is_empty() {
            return Err(RuntimeError::EmptyRepository);
        }
        if profiles.len() > INDEX_MASK as usize {
            return Err(RuntimeError::TooManyModels(profiles.len()));
        }
        let index = profiles
            .iter()
            .position(|p| p.matches(initial))
            .ok_or_else(|| RuntimeError::UnknownInitial(initial.to_string()))?;
        let mut models = Vec::with_capacity(profiles.len());
        let mut preload_times = Vec::with_capacity(profiles.len());
        for profile in profiles {
            let started = Instant::now();
            models.push(Arc::new(PreparedModel::prepare(profile)?));
            preload_times.push(started.elapsed());
        }
        Ok(Self {
            models,
            cell: AtomicU64::new(pack(0, index)),
            preload_times,
        })
    }

    pub fn models(&self) -> &[Arc<PreparedModel>] {
        &self.models
    }

    pub fn profiles(&self) -> impl Iterator<Item = &ModelProfile> {
        self.models.iter().map(|m| &m.profile)
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// Wall time spent preparing each model, in repository order.
    pub fn preload_times(&self) -> impl Iterator<Item = (&str, Duration)> {
        self.models
            .iter()
            .zip(&self.preload_times)
            .map(|(m, t)| (m.id(), *t))
    }

    /// Finds a model by id or display name.
    pub fn position(&self, token: &str) -> Option<usize> {
        self.models.iter().position(|m| m.profile.matches(token))
    }

    pub fn get(&self, token: &str) -> Option<&Arc<PreparedModel>> {
        self.position(token).map(|i| &self.models[i])
    }

    pub fn active(&self) -> ActiveModel {
        let cell = self.cell.load(Ordering::Acquire);
        let index = (cell & INDEX_MASK) as usize;
        ActiveModel {
            index,
            generation: cell >> INDEX_BITS,
            model: self.models[index].clone(),
        }
    }

    pub fn active_id(&self) -> &str {
        let cell = self.cell.load(Ordering::Acquire);
        self.models[(cell & INDEX_MASK) as usize].id()
    }

    pub fn swap_count(&self) -> u64 {
        self.cell.load(Ordering::Acquire) >> INDEX_BITS
    }

    /// Makes `target` the active model and returns how long the swap took.
    /// Switching to the already active model still bumps the generation.
    pub fn apply_switch(&self, target: &str) -> Result<SwitchOutcome, RuntimeError> {
        let started = Instant::now();
        let index = self
            .position(target)
            .ok_or_else(|| RuntimeError::UnknownModel(target.to_string()))?;
        let prev = self
            .cell
            .fetch_update(Ordering::AcqRel, Ordering::Acquire, |cell| {
                Some(pack((cell >> INDEX_BITS) + 1, index))
            })
            .expect("update closure never declines");
        let latency = started.elapsed();
        Ok(SwitchOutcome {
            from: self.models[(prev & INDEX_MASK) as usize].id().to_string(),
            to: self.models[index].id().to_string(),
            generation: (prev >> INDEX_BITS) + 1,
            latency,
        })
    }
}
