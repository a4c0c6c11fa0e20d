//! Shared value types and the experiment configuration schema.
//!
//! Nothing in here performs I/O. Every type round-trips through serde so the
//! same shapes appear in config files, index documents and REST bodies.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::loadgen::TraceSpec;
use crate::mape::strategy::Strategy;

/// Parametric stand-in for one detector variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub id: String,
    pub display_name: String,
    /// Mean inference latency in seconds.
    pub latency_mean: f64,
    /// Coefficient of variation of the latency distribution.
    pub latency_cv: f64,
    pub confidence_mean: f64,
    pub confidence_sd: f64,
    /// Expected raw detections per request.
    pub detections_mean: f64,
    /// Abstract load units charged per inference.
    pub cpu_cost: f64,
}

impl ModelProfile {
    /// True when `token` names this profile by id or display name.
    pub fn matches(&self, token: &str) -> bool {
        self.id == token || self.display_name == token
    }

    fn check(&self) -> Option<String> {
        let finite = [
            self.latency_mean,
            self.latency_cv,
            self.confidence_mean,
            self.confidence_sd,
            self.detections_mean,
            self.cpu_cost,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Some("non-finite parameter".into());
        }
        if self.latency_mean <= 0.0 {
            return Some("latency_mean must be > 0".into());
        }
        if !(self.confidence_mean > 0.0 && self.confidence_mean <= 1.0) {
            return Some("confidence_mean must lie in (0, 1]".into());
        }
        if self.latency_cv < 0.0 || self.confidence_sd < 0.0 {
            return Some("dispersion parameters must be >= 0".into());
        }
        if self.detections_mean < 0.0 || self.cpu_cost < 0.0 {
            return Some("detections_mean and cpu_cost must be >= 0".into());
        }
        None
    }
}

/// The five shipped profiles, smallest and fastest first.
///
/// Only the nano latency (0.015 s) and confidence (0.65) are measured
/// anchors; the larger variants are placeholders chosen to keep latency and
/// confidence strictly increasing together. Override them in the config for
/// anything quantitative.
pub fn default_profiles() -> Vec<ModelProfile> {
    const ROWS: [(&str, &str, f64, f64, f64, f64); 5] = [
        ("n", "yolov5nu", 0.015, 0.65, 3.8, 1.0),
        ("s", "yolov5su", 0.025, 0.69, 4.2, 1.6),
        ("m", "yolov5mu", 0.045, 0.73, 4.5, 2.8),
        ("l", "yolov5lu", 0.070, 0.76, 4.8, 4.4),
        ("x", "yolov5xu", 0.110, 0.79, 5.0, 6.9),
    ];
    ROWS.iter()
        .map(|&(id, name, lat, conf, det, cpu)| ModelProfile {
            id: id.to_string(),
            display_name: name.to_string(),
            latency_mean: lat,
            latency_cv: 0.25,
            confidence_mean: conf,
            confidence_sd: 0.05,
            detections_mean: det,
            cpu_cost: cpu,
        })
        .collect()
}

/// Request body as held by the backlog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    /// Bytes kept in memory.
    Inline { bytes: Vec<u8> },
    /// Bytes moved to the spill area; only the path and length stay resident.
    Spilled { path: std::path::PathBuf, len: u64 },
    /// No bytes at all, just a nominal size (virtual-time runs).
    Synthetic { len: u64 },
}

impl Payload {
    pub fn len(&self) -> u64 {
        match self {
            Payload::Inline { bytes } => bytes.len() as u64,
            Payload::Spilled { len, .. } | Payload::Synthetic { len } => *len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One ingested work item. Times are on the experiment clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub request_id: u64,
    pub payload: Payload,
    pub arrival_time: f64,
    pub enqueue_time: f64,
    pub start_time: Option<f64>,
    pub finish_time: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: u32,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub raw: Vec<Detection>,
    pub kept: Vec<Detection>,
    pub kept_count: usize,
    /// Mean of kept confidences, 0 when nothing was kept.
    pub avg_confidence: f64,
}

/// Per-request observability document stored in `final_metrics`.
///
/// `log_id` is assigned by the knowledge store on append; records built by
/// the worker carry 0 until then.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub log_id: u64,
    pub timestamp: f64,
    pub request_no: u64,
    pub request_id: u64,
    pub model_name: String,
    /// Swap generation of the active-model cell when the request started.
    pub model_generation: u64,
    pub model_processing_time: f64,
    pub total_time: f64,
    pub absolute_time: f64,
    pub arrival_time: f64,
    pub start_time: f64,
    pub finish_time: f64,
    pub utility: f64,
    pub kept_count: usize,
    pub avg_confidence: f64,
    pub queue_depth_at_start: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpu_load: Option<f64>,
}

/// Ordered interarrival gaps in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalTrace {
    pub gaps: Vec<f64>,
    #[serde(default)]
    pub source_label: String,
}

impl ArrivalTrace {
    pub fn new(gaps: Vec<f64>, source_label: impl Into<String>) -> Self {
        Self {
            gaps,
            source_label: source_label.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.gaps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaps.is_empty()
    }

    /// Sum of all gaps: the issue time of the last request.
    pub fn duration(&self) -> f64 {
        self.gaps.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    RealTime,
    #[default]
    VirtualTime,
}

impl fmt::Display for ClockMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClockMode::RealTime => "real_time",
            ClockMode::VirtualTime => "virtual_time",
        })
    }
}

/// Strategy selection as written by users: a kind token plus a free-form
/// parameter map. [`Strategy::from_spec`] turns it into a typed strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub kind: String,
    #[serde(default)]
    pub params: serde_json::Map<String, Value>,
}

impl StrategySpec {
    pub const KINDS: [&'static str; 5] =
        ["single", "naive", "modified_naive", "adamls", "external"];

    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            params: serde_json::Map::new(),
        }
    }

    pub fn with_param(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.params.insert(key.to_string(), value.into());
        self
    }

    pub fn single(model: &str) -> Self {
        Self::new("single").with_param("model", model)
    }

    pub fn naive() -> Self {
        Self::new("naive")
    }

    pub fn adamls() -> Self {
        Self::new("adamls")
    }

    pub fn external(path: impl AsRef<std::path::Path>) -> Self {
        Self::new("external").with_param("path", path.as_ref().to_string_lossy().into_owned())
    }
}

impl Default for StrategySpec {
    fn default() -> Self {
        Self::adamls()
    }
}

/// Output of the planner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyDecision {
    pub model_id: String,
    pub reason: String,
    pub decided_at: f64,
}

/// Which detection classes survive post-processing.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(from = "Option<BTreeSet<u32>>", into = "Option<BTreeSet<u32>>")]
pub enum ClassFilter {
    #[default]
    All,
    Only(BTreeSet<u32>),
}

impl ClassFilter {
    pub fn only(ids: impl IntoIterator<Item = u32>) -> Self {
        ClassFilter::Only(ids.into_iter().collect())
    }

    pub fn admits(&self, class_id: u32) -> bool {
        match self {
            ClassFilter::All => true,
            ClassFilter::Only(set) => set.contains(&class_id),
        }
    }
}

impl From<Option<BTreeSet<u32>>> for ClassFilter {
    fn from(v: Option<BTreeSet<u32>>) -> Self {
        v.map_or(ClassFilter::All, ClassFilter::Only)
    }
}

impl From<ClassFilter> for Option<BTreeSet<u32>> {
    fn from(f: ClassFilter) -> Self {
        match f {
            ClassFilter::All => None,
            ClassFilter::Only(set) => Some(set),
        }
    }
}

/// Where request bytes come from during replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PayloadSpec {
    /// Every request carries `size` filler bytes.
    Fixed { size: usize },
    /// Files from a directory or a tar archive, issued round-robin.
    Files { path: std::path::PathBuf },
}

impl Default for PayloadSpec {
    fn default() -> Self {
        PayloadSpec::Fixed { size: 1024 }
    }
}

/// Child-process inference backend. Disabled unless present in the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutorConfig {
    pub command: String,
    #[serde(default)]
    pub args: Vec<String>,
}

fn default_experiment_id() -> String {
    "experiment".to_string()
}
fn default_target() -> f64 {
    0.5
}
fn default_threshold() -> f64 {
    0.35
}
fn default_period() -> f64 {
    1.0
}
fn default_universe() -> u32 {
    80
}
fn default_spill_threshold() -> usize {
    1 << 20
}
fn default_idle_poll() -> f64 {
    0.005
}

/// Everything needed to reproduce one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_experiment_id")]
    pub experiment_id: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub clock_mode: ClockMode,
    #[serde(default = "default_target")]
    pub target_response_time: f64,
    #[serde(default = "default_threshold")]
    pub confidence_threshold: f64,
    #[serde(default)]
    pub class_filter: ClassFilter,
    /// Size of the class-id universe detections are drawn from.
    #[serde(default = "default_universe")]
    pub class_universe: u32,
    #[serde(default)]
    pub request_limit: Option<u64>,
    #[serde(default = "default_period")]
    pub mape_period: f64,
    /// Trailing window for the arrival-rate estimate; defaults to `mape_period`.
    #[serde(default)]
    pub monitor_window: Option<f64>,
    /// Model active before the first decision; defaults to the first profile.
    #[serde(default)]
    pub initial_model: Option<String>,
    #[serde(default)]
    pub backlog_capacity: Option<usize>,
    #[serde(default = "default_spill_threshold")]
    pub spill_threshold: usize,
    /// Worker idle poll interval in seconds (real-time mode only).
    #[serde(default = "default_idle_poll")]
    pub worker_idle_poll: f64,
    #[serde(default)]
    pub payload: PayloadSpec,
    #[serde(default)]
    pub executor: Option<ExecutorConfig>,
    pub trace: TraceSpec,
    #[serde(default)]
    pub strategy: StrategySpec,
    #[serde(default = "default_profiles")]
    pub profiles: Vec<ModelProfile>,
}

impl ExperimentConfig {
    /// A config with every default and the given trace.
    pub fn new(experiment_id: impl Into<String>, trace: TraceSpec) -> Self {
        Self {
            experiment_id: experiment_id.into(),
            seed: 0,
            clock_mode: ClockMode::VirtualTime,
            target_response_time: default_target(),
            confidence_threshold: default_threshold(),
            class_filter: ClassFilter::All,
            class_universe: default_universe(),
            request_limit: None,
            mape_period: default_period(),
            monitor_window: None,
            initial_model: None,
            backlog_capacity: None,
            spill_threshold: default_spill_threshold(),
            worker_idle_poll: default_idle_poll(),
            payload: PayloadSpec::default(),
            executor: None,
            trace,
            strategy: StrategySpec::default(),
            profiles: default_profiles(),
        }
    }

    pub fn monitor_window(&self) -> f64 {
        self.monitor_window.unwrap_or(self.mape_period)
    }

    pub fn initial_model(&self) -> &str {
        self.initial_model
            .as_deref()
            .unwrap_or_else(|| self.profiles.first().map(|p| p.id.as_str()).unwrap_or(""))
    }

    pub fn profile(&self, token: &str) -> Option<&ModelProfile> {
        self.profiles.iter().find(|p| p.matches(token))
    }

    pub fn to_toml(&self) -> Result<String, toml::ser::Error> {
        toml::to_string_pretty(self)
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("no model profiles configured")]
    EmptyProfiles,
    #[error("target_response_time must be > 0 (got {0})")]
    NonPositiveTarget(f64),
    #[error("unknown strategy kind {0:?}")]
    UnknownStrategyKind(String),
    #[error("profiles must be strictly increasing in latency and confidence: {0}")]
    UnorderedProfiles(String),
    #[error("duplicate profile id {0:?}")]
    DuplicateProfileId(String),
    #[error("profile {id:?}: {reason}")]
    InvalidProfile { id: String, reason: String },
    #[error("confidence_threshold must lie in [0, 1] (got {0})")]
    ThresholdOutOfRange(f64),
    #[error("{field} must be > 0 (got {value})")]
    NonPositivePeriod { field: &'static str, value: f64 },
    #[error("initial model {0:?} is not among the profiles")]
    UnknownInitialModel(String),
    #[error("invalid strategy parameters: {0}")]
    InvalidStrategyParams(String),
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
    #[error("experiment_id {0:?} must be a non-empty name of letters, digits, '-', '_' or '.'")]
    InvalidExperimentId(String),
}

/// Checks every invariant and reports all violations at once.
pub fn validate_config(config: ExperimentConfig) -> Result<ExperimentConfig, Vec<ConfigError>> {
    let mut errors = Vec::new();

    if !valid_experiment_id(&config.experiment_id) {
        errors.push(ConfigError::InvalidExperimentId(
            config.experiment_id.clone(),
        ));
    }
    if config.profiles.is_empty() {
        errors.push(ConfigError::EmptyProfiles);
    }
    if !(config.target_response_time > 0.0) {
        errors.push(ConfigError::NonPositiveTarget(config.target_response_time));
    }
    if !(0.0..=1.0).contains(&config.confidence_threshold) {
        errors.push(ConfigError::ThresholdOutOfRange(
            config.confidence_threshold,
        ));
    }
    for (field, value) in [
        ("mape_period", config.mape_period),
        ("monitor_window", config.monitor_window()),
        ("worker_idle_poll", config.worker_idle_poll),
    ] {
        if !(value > 0.0 && value.is_finite()) {
            errors.push(ConfigError::NonPositivePeriod { field, value });
        }
    }

    let mut seen = BTreeMap::new();
    for p in &config.profiles {
        if seen.insert(p.id.as_str(), ()).is_some() {
            errors.push(ConfigError::DuplicateProfileId(p.id.clone()));
        }
        if let Some(reason) = p.check() {
            errors.push(ConfigError::InvalidProfile {
                id: p.id.clone(),
                reason,
            });
        }
    }
    errors.extend(check_ordering(&config.profiles));

    if !config.profiles.is_empty() && config.profile(config.initial_model()).is_none() {
        errors.push(ConfigError::UnknownInitialModel(
            config.initial_model().to_string(),
        ));
    }

    if !StrategySpec::KINDS.contains(&config.strategy.kind.as_str()) {
        errors.push(ConfigError::UnknownStrategyKind(
            config.strategy.kind.clone(),
        ));
    } else if let Err(e) = Strategy::from_spec(&config.strategy, &config.profiles) {
        errors.push(ConfigError::InvalidStrategyParams(e.to_string()));
    }

    if let Err(e) = config.trace.check() {
        errors.push(ConfigError::InvalidTrace(e));
    }

    if errors.is_empty() {
        Ok(config)
    } else {
        Err(errors)
    }
}

/// Experiment ids double as directory names.
pub fn valid_experiment_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id != "uploads"
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
}

/// Profiles must be listed fastest-first with confidence rising alongside.
fn check_ordering(profiles: &[ModelProfile]) -> Option<ConfigError> {
    let bad: Vec<String> = profiles
        .windows(2)
        .filter(|w| {
            !(w[0].latency_mean < w[1].latency_mean && w[0].confidence_mean < w[1].confidence_mean)
        })
        .map(|w| format!("{} !< {}", w[0].id, w[1].id))
        .collect();
    (!bad.is_empty()).then(|| ConfigError::UnorderedProfiles(bad.join(", ")))
}

/// Online statistics the knowledge store keeps per model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelStats {
    pub latency_mean: f64,
    pub latency_var: f64,
    /// Mean of per-request kept confidence over requests that kept anything.
    pub confidence_mean: f64,
    pub samples: u64,
    pub last_seen: f64,
    // decayed weight sums backing the means above
    pub(crate) latency_weight: f64,
    pub(crate) latency_m2: f64,
    pub(crate) confidence_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeState {
    pub models: BTreeMap<String, ModelStats>,
    pub rules: StrategySpec,
    pub arrival_rate: f64,
}

impl KnowledgeState {
    pub fn new<'a>(model_ids: impl IntoIterator<Item = &'a str>, rules: StrategySpec) -> Self {
        Self {
            models: model_ids
                .into_iter()
                .map(|id| (id.to_string(), ModelStats::default()))
                .collect(),
            rules,
            arrival_rate: 0.0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loadgen::{SynthSpec, TraceSpec};

    fn base() -> ExperimentConfig {
        ExperimentConfig::new(
            "t",
            TraceSpec::Synthetic {
                synth: SynthSpec::Constant { gap: 0.1 },
                count: 10,
                seed: None,
            },
        )
    }

    #[test]
    fn default_config_validates() {
        let cfg = base();
        assert_eq!(validate_config(cfg.clone()), Ok(cfg));
    }

    #[test]
    fn nano_anchors() {
        let p = default_profiles();
        let n = p.iter().find(|p| p.id == "n").unwrap();
        assert_eq!(n.latency_mean, 0.015);
        assert_eq!(n.confidence_mean, 0.65);
        assert!(p.windows(2).all(|w| w[0].latency_mean < w[1].latency_mean));
        assert!(p
            .windows(2)
            .all(|w| w[0].confidence_mean < w[1].confidence_mean));
        let ids: Vec<_> = p.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, ["n", "s", "m", "l", "x"]);
    }

    #[test]
    fn unordered_profiles_rejected() {
        let mut cfg = base();
        cfg.profiles[4].latency_mean = 0.001;
        let errs = validate_config(cfg).unwrap_err();
        assert!(matches!(errs[..], [ConfigError::UnorderedProfiles(_)]));
    }

    #[test]
    fn zero_target_rejected() {
        let mut cfg = base();
        cfg.target_response_time = 0.0;
        let errs = validate_config(cfg).unwrap_err();
        assert_eq!(errs, vec![ConfigError::NonPositiveTarget(0.0)]);
    }

    #[test]
    fn all_violations_reported() {
        let mut cfg = base();
        cfg.profiles.clear();
        cfg.target_response_time = -1.0;
        cfg.strategy = StrategySpec::new("genetic");
        let errs = validate_config(cfg).unwrap_err();
        assert!(errs.contains(&ConfigError::EmptyProfiles));
        assert!(errs.contains(&ConfigError::NonPositiveTarget(-1.0)));
        assert!(errs.contains(&ConfigError::UnknownStrategyKind("genetic".into())));
    }

    #[test]
    fn validation_is_idempotent() {
        let cfg = validate_config(base()).unwrap();
        assert_eq!(validate_config(cfg.clone()).unwrap(), cfg);
    }

    #[test]
    fn config_toml_round_trip() {
        let mut cfg = base();
        cfg.class_filter = ClassFilter::only([0, 2]);
        cfg.strategy = StrategySpec::single("m");
        cfg.request_limit = Some(7);
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn minimal_toml_takes_defaults() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            [trace]
            source = "inline"
            gaps = [0.5, 0.2]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.target_response_time, 0.5);
        assert_eq!(cfg.confidence_threshold, 0.35);
        assert_eq!(cfg.mape_period, 1.0);
        assert_eq!(cfg.profiles, default_profiles());
        assert!(validate_config(cfg).is_ok());
    }

    #[test]
    fn payload_len() {
        assert_eq!(
            Payload::Inline {
                bytes: vec![1, 2, 3]
            }
            .len(),
            3
        );
        assert_eq!(Payload::Synthetic { len: 9 }.len(), 9);
    }
}
