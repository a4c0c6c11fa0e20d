//! Load generation: arrival traces, payload sources and trace replay.

mod replay;
mod synth;
mod trace;

use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::domain::{ArrivalTrace, PayloadSpec};

pub use replay::{
    issue_times, replay_real_time, IngestTarget, ReplayReport, ScheduleStats, SubmitError,
};
pub use synth::{synth_trace, SynthSpec};
pub use trace::{import_counts, parse_trace, render_trace, scale_trace};

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("negative gap on line {0}")]
    NegativeGap(usize),
    #[error("non-numeric value on line {0}")]
    NonNumeric(usize),
    #[error("trace has no arrivals")]
    EmptyTrace,
    #[error("scale factor must be > 0 (got {0})")]
    NonPositiveFactor(f64),
    #[error("invalid synthetic parameters: {0}")]
    InvalidParams(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceFormat {
    /// One gap per line.
    #[default]
    Gaps,
    /// `timestamp,count` rows.
    Counts,
}

/// Where an experiment's arrivals come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum TraceSpec {
    File {
        path: PathBuf,
        #[serde(default)]
        format: TraceFormat,
        /// Multiplies the request rate (divides every gap).
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rate_factor: Option<f64>,
    },
    Inline {
        gaps: Vec<f64>,
    },
    Synthetic {
        synth: SynthSpec,
        count: usize,
        /// Defaults to the experiment seed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
}

impl TraceSpec {
    pub fn file(path: impl Into<PathBuf>) -> Self {
        TraceSpec::File {
            path: path.into(),
            format: TraceFormat::Gaps,
            rate_factor: None,
        }
    }

    /// Checks what can be checked without reading files.
    pub fn check(&self) -> Result<(), String> {
        match self {
            TraceSpec::File { rate_factor, .. } => match rate_factor {
                Some(f) if !(*f > 0.0 && f.is_finite()) => {
                    Err(TraceError::NonPositiveFactor(*f).to_string())
                }
                _ => Ok(()),
            },
            TraceSpec::Inline { gaps } => {
                if gaps.is_empty() {
                    return Err(TraceError::EmptyTrace.to_string());
                }
                match gaps.iter().position(|g| !(g.is_finite() && *g >= 0.0)) {
                    Some(i) => Err(TraceError::NegativeGap(i + 1).to_string()),
                    None => Ok(()),
                }
            }
            TraceSpec::Synthetic { synth, count, .. } => {
                synth.check().map_err(|e| e.to_string())?;
                if *count == 0 {
                    return Err(TraceError::EmptyTrace.to_string());
                }
                Ok(())
            }
        }
    }

    pub fn load(&self, default_seed: u64) -> Result<ArrivalTrace, TraceError> {
        self.check().map_err(TraceError::InvalidParams)?;
        match self {
            TraceSpec::File {
                path,
                format,
                rate_factor,
            } => {
                let text = std::fs::read_to_string(path).map_err(|e| TraceError::Io {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
                let label = path.display().to_string();
                let trace = match format {
                    TraceFormat::Gaps => parse_trace(&text, &label)?,
                    TraceFormat::Counts => import_counts(&text, &label)?,
                };
                match rate_factor {
                    Some(f) => scale_trace(&trace, *f),
                    None => Ok(trace),
                }
            }
            TraceSpec::Inline { gaps } => Ok(ArrivalTrace::new(gaps.clone(), "inline")),
            TraceSpec::Synthetic { synth, count, seed } => {
                synth_trace(synth, seed.unwrap_or(default_seed), *count)
            }
        }
    }
}

/// Request bodies for replay, issued round-robin.
#[derive(Debug, Clone)]
pub enum PayloadSource {
    Fixed(usize),
    Files { items: Vec<Vec<u8>>, next: usize },
}

impl PayloadSource {
    pub fn from_spec(spec: &PayloadSpec) -> Result<Self, TraceError> {
        match spec {
            PayloadSpec::Fixed { size } => Ok(PayloadSource::Fixed(*size)),
            PayloadSpec::Files { path } => {
                let io = |e: std::io::Error| TraceError::Io {
                    path: path.clone(),
                    message: e.to_string(),
                };
                let items = if path.is_dir() {
                    read_dir_sorted(path).map_err(io)?
                } else {
                    let file = std::fs::File::open(path).map_err(io)?;
                    read_tar(file).map_err(io)?
                };
                if items.is_empty() {
                    return Err(TraceError::Io {
                        path: path.clone(),
                        message: "no payload files".into(),
                    });
                }
                Ok(PayloadSource::Files { items, next: 0 })
            }
        }
    }

    pub fn next_bytes(&mut self) -> Vec<u8> {
        match self {
            PayloadSource::Fixed(size) => vec![0u8; *size],
            PayloadSource::Files { items, next } => {
                let b = items[*next % items.len()].clone();
                *next += 1;
                b
            }
        }
    }

    /// Size of the next payload without materialising it.
    pub fn next_len(&mut self) -> u64 {
        match self {
            PayloadSource::Fixed(size) => *size as u64,
            PayloadSource::Files { items, next } => {
                let n = items[*next % items.len()].len();
                *next += 1;
                n as u64
            }
        }
    }
}

fn read_dir_sorted(dir: &Path) -> std::io::Result<Vec<Vec<u8>>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    paths.iter().map(std::fs::read).collect()
}

/// Regular-file entries of a tar archive, in archive order.
pub fn read_tar(reader: impl Read) -> std::io::Result<Vec<Vec<u8>>> {
    let mut archive = tar::Archive::new(reader);
    let mut out = Vec::new();
    for entry in archive.entries()? {
        let mut entry = entry?;
        if entry.header().entry_type().is_file() {
            let mut buf = Vec::new();
            entry.read_to_end(&mut buf)?;
            out.push(buf);
        }
    }
    Ok(out)
}
