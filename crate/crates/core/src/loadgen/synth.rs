//! Synthetic arrival processes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::domain::ArrivalTrace;

use super::TraceError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SynthSpec {
    /// Exponential gaps at `rate` per second.
    Poisson {
        rate: f64,
    },
    /// Alternating Poisson phases of `phase_length` seconds, high first.
    Bursty {
        high_rate: f64,
        low_rate: f64,
        phase_length: f64,
    },
    Constant {
        gap: f64,
    },
}

impl SynthSpec {
    pub fn check(&self) -> Result<(), TraceError> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        let valid = match *self {
            SynthSpec::Poisson { rate } => ok(rate),
            SynthSpec::Bursty {
                high_rate,
                low_rate,
                phase_length,
            } => ok(high_rate) && ok(low_rate) && ok(phase_length),
            SynthSpec::Constant { gap } => gap >= 0.0 && gap.is_finite(),
        };
        if valid {
            Ok(())
        } else {
            Err(TraceError::InvalidParams(format!("{self:?}")))
        }
    }

    fn label(&self) -> String {
        match self {
            SynthSpec::Poisson { rate } => format!("poisson({rate}/s)"),
            SynthSpec::Bursty {
                high_rate,
                low_rate,
                phase_length,
            } => format!("bursty({high_rate}/s, {low_rate}/s, {phase_length}s)"),
            SynthSpec::Constant { gap } => format!("constant({gap}s)"),
        }
    }
}

/// `count` arrivals from `spec`; identical for identical seeds.
pub fn synth_trace(spec: &SynthSpec, seed: u64, count: usize) -> Result<ArrivalTrace, TraceError> {
    spec.check()?;
    if count == 0 {
        return Err(TraceError::InvalidParams("count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Exp::new(1.0).expect("rate 1 is valid");
    let gaps = match *spec {
        SynthSpec::Constant { gap } => vec![gap; count],
        SynthSpec::Poisson { rate } => (0..count).map(|_| unit.sample(&mut rng) / rate).collect(),
        SynthSpec::Bursty {
            high_rate,
            low_rate,
            phase_length,
        } => {
            // Piecewise-constant rate: spend unit-rate "work" across phase
            // boundaries, so each phase is exactly Poisson at its rate.
            let rate_at = |t: f64| {
                if ((t / phase_length).floor() as u64).is_multiple_of(2) {
                    high_rate
                } else {
                    low_rate
                }
            };
            let mut t = 0.0f64;
            let mut gaps = Vec::with_capacity(count);
            for _ in 0..count {
                let start = t;
                let mut work = unit.sample(&mut rng);
                loop {
                    let rate = rate_at(t);
                    let boundary = ((t / phase_length).floor() + 1.0) * phase_length;
                    let span = boundary - t;
                    if work <= span * rate {
                        t += work / rate;
                        break;
                    }
                    work -= span * rate;
                    t = boundary;
                }
                gaps.push(t - start);
            }
            gaps
        }
    };
    Ok(ArrivalTrace::new(gaps, spec.label()))
}
