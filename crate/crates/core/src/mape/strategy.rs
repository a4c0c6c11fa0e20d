//! Typed adaptation strategies and the two pure selection rules.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::domain::{ModelProfile, StrategySpec};

use super::analyze::AnalysisReport;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StrategyError {
    #[error("unknown strategy kind {0:?}")]
    UnknownKind(String),
    #[error("missing parameter {0:?}")]
    MissingParam(&'static str),
    #[error("parameter {0:?} has the wrong type or range")]
    BadParam(&'static str),
    #[error("unknown model {0:?}")]
    UnknownModel(String),
    #[error("malformed bands: {0}")]
    MalformedBands(String),
}

/// `[lo, hi)` in requests/second; `hi` of `None` is unbounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub lo: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hi: Option<f64>,
    pub model: String,
}

impl Band {
    pub fn contains(&self, rate: f64) -> bool {
        self.lo <= rate && self.hi.is_none_or(|hi| rate < hi)
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.hi {
            Some(hi) => write!(f, "[{}, {})", self.lo, hi),
            None => write!(f, "[{}, inf)", self.lo),
        }
    }
}

/// Rate bands sorted by lower bound, covering `[0, inf)` without gaps or
/// overlaps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandTable(Vec<Band>);

impl BandTable {
    pub fn new(mut bands: Vec<Band>) -> Result<Self, StrategyError> {
        if bands.is_empty() {
            return Err(StrategyError::MalformedBands("no bands".into()));
        }
        if bands
            .iter()
            .any(|b| !b.lo.is_finite() || b.hi.is_some_and(|h| !h.is_finite()))
        {
            return Err(StrategyError::MalformedBands("non-finite bound".into()));
        }
        bands.sort_by(|a, b| a.lo.total_cmp(&b.lo));
        if bands[0].lo != 0.0 {
            return Err(StrategyError::MalformedBands(format!(
                "gap: lowest band starts at {}",
                bands[0].lo
            )));
        }
        for b in &bands {
            if b.hi.is_some_and(|hi| hi <= b.lo) {
                return Err(StrategyError::MalformedBands(format!("empty band {b}")));
            }
        }
        for w in bands.windows(2) {
            match w[0].hi {
                None => {
                    return Err(StrategyError::MalformedBands(format!(
                        "overlap: {} and {}",
                        w[0], w[1]
                    )))
                }
                Some(hi) if hi < w[1].lo => {
                    return Err(StrategyError::MalformedBands(format!(
                        "gap between {} and {}",
                        w[0], w[1]
                    )))
                }
                Some(hi) if hi > w[1].lo => {
                    return Err(StrategyError::MalformedBands(format!(
                        "overlap: {} and {}",
                        w[0], w[1]
                    )))
                }
                _ => {}
            }
        }
        if let Some(last) = bands.last().filter(|b| b.hi.is_some()) {
            return Err(StrategyError::MalformedBands(format!("gap above {last}")));
        }
        Ok(Self(bands))
    }

    /// Nano at 15/s and above, the largest model below 2/s, the middle
    /// variants in between.
    pub fn default_naive() -> Self {
        let band = |lo: f64, hi: Option<f64>, model: &str| Band {
            lo,
            hi,
            model: model.to_string(),
        };
        Self(vec![
            band(0.0, Some(2.0), "x"),
            band(2.0, Some(4.0), "l"),
            band(4.0, Some(8.0), "m"),
            band(8.0, Some(15.0), "s"),
            band(15.0, None, "n"),
        ])
    }

    pub fn bands(&self) -> &[Band] {
        &self.0
    }

    /// The band containing `rate`; negative rates fall into the first band.
    pub fn band_for(&self, rate: f64) -> &Band {
        let idx = self.0.partition_point(|b| b.lo <= rate);
        &self.0[idx.saturating_sub(1)]
    }
}

impl<'de> Deserialize<'de> for BandTable {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let bands = Vec::<Band>::deserialize(d)?;
        BandTable::new(bands).map_err(serde::de::Error::custom)
    }
}

/// Model for the band containing `rate`.
pub fn naive_select(rate: f64, bands: &BandTable) -> &str {
    &bands.band_for(rate).model
}

/// Highest predicted confidence among models predicted to meet `target`,
/// ties to the lower latency. If none meets it, the fastest prediction.
pub fn adamls_select(report: &AnalysisReport, target: f64) -> &str {
    let qualifying = report
        .predictions
        .iter()
        .filter(|p| p.response_time <= target)
        .max_by(|a, b| {
            a.confidence
                .total_cmp(&b.confidence)
                .then_with(|| b.latency.total_cmp(&a.latency))
        });
    let chosen = qualifying.or_else(|| {
        report
            .predictions
            .iter()
            .min_by(|a, b| a.response_time.total_cmp(&b.response_time))
    });
    chosen
        .map(|p| p.model_id.as_str())
        .unwrap_or(&report.active_model)
}

/// Default AdaMLS lookahead in seconds.
pub const DEFAULT_LOOKAHEAD: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub enum Strategy {
    Single {
        model: String,
    },
    Naive {
        bands: BandTable,
        modified: bool,
    },
    AdaMls {
        /// Overrides the experiment's target response time.
        target: Option<f64>,
        half_life: f64,
        /// Seconds of arrival-rate projection added to the queue-aware
        /// prediction for overloaded models; 0 disables it.
        lookahead: f64,
    },
    External {
        path: PathBuf,
        poll_period: Option<f64>,
    },
}

fn num(
    params: &serde_json::Map<String, Value>,
    key: &'static str,
) -> Result<Option<f64>, StrategyError> {
    match params.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => v.as_f64().map(Some).ok_or(StrategyError::BadParam(key)),
    }
}

fn positive(
    params: &serde_json::Map<String, Value>,
    key: &'static str,
) -> Result<Option<f64>, StrategyError> {
    match num(params, key)? {
        Some(v) if !(v > 0.0) => Err(StrategyError::BadParam(key)),
        other => Ok(other),
    }
}

impl Strategy {
    /// Parses and validates a spec against the available profiles.
    pub fn from_spec(
        spec: &StrategySpec,
        profiles: &[ModelProfile],
    ) -> Result<Self, StrategyError> {
        let p = &spec.params;
        let known = |token: &str| -> Result<String, StrategyError> {
            profiles
                .iter()
                .find(|m| m.matches(token))
                .map(|m| m.id.clone())
                .ok_or_else(|| StrategyError::UnknownModel(token.to_string()))
        };
        let strategy = match spec.kind.as_str() {
            "single" => {
                let token = p
                    .get("model")
                    .ok_or(StrategyError::MissingParam("model"))?
                    .as_str()
                    .ok_or(StrategyError::BadParam("model"))?;
                Strategy::Single {
                    model: known(token)?,
                }
            }
            kind @ ("naive" | "modified_naive") => {
                let modified = kind == "modified_naive";
                let bands = match p.get("bands") {
                    Some(v) => {
                        let raw: Vec<Band> = serde_json::from_value(v.clone())
                            .map_err(|e| StrategyError::MalformedBands(e.to_string()))?;
                        BandTable::new(raw)?
                    }
                    None if modified => return Err(StrategyError::MissingParam("bands")),
                    None => BandTable::default_naive(),
                };
                let resolved = bands
                    .bands()
                    .iter()
                    .map(|b| {
                        Ok(Band {
                            model: known(&b.model)?,
                            ..b.clone()
                        })
                    })
                    .collect::<Result<Vec<_>, StrategyError>>()?;
                Strategy::Naive {
                    bands: BandTable(resolved),
                    modified,
                }
            }
            "adamls" => Strategy::AdaMls {
                target: positive(p, "target")?,
                half_life: positive(p, "half_life")?.unwrap_or(crate::knowledge::DEFAULT_HALF_LIFE),
                lookahead: match num(p, "lookahead")? {
                    Some(v) if v < 0.0 || !v.is_finite() => {
                        return Err(StrategyError::BadParam("lookahead"))
                    }
                    Some(v) => v,
                    None => DEFAULT_LOOKAHEAD,
                },
            },
            "external" => Strategy::External {
                path: PathBuf::from(
                    p.get("path")
                        .ok_or(StrategyError::MissingParam("path"))?
                        .as_str()
                        .ok_or(StrategyError::BadParam("path"))?,
                ),
                poll_period: positive(p, "poll_period")?,
            },
            other => return Err(StrategyError::UnknownKind(other.to_string())),
        };
        Ok(strategy)
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Strategy::Single { .. } => "single",
            Strategy::Naive {
                modified: false, ..
            } => "naive",
            Strategy::Naive { modified: true, .. } => "modified_naive",
            Strategy::AdaMls { .. } => "adamls",
            Strategy::External { .. } => "external",
        }
    }
}
