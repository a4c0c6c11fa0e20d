//! Per-experiment summaries and cross-experiment comparison tables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::domain::MetricsRecord;

/// Nearest-rank percentile of an ascending slice; 0 for an empty slice.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Aggregates over an experiment's `final_metrics`. Everything except the
/// `accepted`, `dropped` and `residual_depth` fields can be recomputed from
/// the exported index alone.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub experiment_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    pub total_processed: u64,
    /// Mean per-request confidence over requests that kept a detection.
    pub avg_confidence: f64,
    /// Summed model cost units per second of experiment time.
    pub avg_cpu: f64,
    pub total_objects_detected: u64,
    pub avg_model_processing_time: f64,
    pub avg_image_processing_time: f64,
    pub p95_total_time: f64,
    pub utility_mean: f64,
    /// Changes of serving model between consecutive records.
    pub switches: u64,
    /// Experiment time of the last completion.
    pub duration: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accepted: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropped: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_depth: Option<usize>,
}

impl ExperimentSummary {
    pub fn from_records(experiment_id: impl Into<String>, records: &[MetricsRecord]) -> Self {
        let mut s = Self {
            experiment_id: experiment_id.into(),
            ..Self::default()
        };
        if records.is_empty() {
            return s;
        }
        let n = records.len() as f64;
        s.total_processed = records.len() as u64;
        let confident: Vec<f64> = records
            .iter()
            .filter(|r| r.kept_count > 0)
            .map(|r| r.avg_confidence)
            .collect();
        s.avg_confidence = if confident.is_empty() {
            0.0
        } else {
            confident.iter().sum::<f64>() / confident.len() as f64
        };
        s.duration = records.iter().map(|r| r.absolute_time).fold(0.0, f64::max);
        let cpu: f64 = records.iter().filter_map(|r| r.cpu_load).sum();
        s.avg_cpu = if s.duration > 0.0 {
            cpu / s.duration
        } else {
            0.0
        };
        s.total_objects_detected = records.iter().map(|r| r.kept_count as u64).sum();
        s.avg_model_processing_time =
            records.iter().map(|r| r.model_processing_time).sum::<f64>() / n;
        s.avg_image_processing_time = records.iter().map(|r| r.total_time).sum::<f64>() / n;
        let mut totals: Vec<f64> = records.iter().map(|r| r.total_time).collect();
        totals.sort_by(f64::total_cmp);
        s.p95_total_time = percentile(&totals, 0.95);
        s.utility_mean = records.iter().map(|r| r.utility).sum::<f64>() / n;
        s.switches = records
            .windows(2)
            .filter(|w| w[0].model_name != w[1].model_name)
            .count() as u64;
        s
    }
}

/// Row labels of the comparison table, in order.
pub const COMPARISON_METRICS: [&str; 6] = [
    "Total Images Processed",
    "Average Confidence Score",
    "Average CPU Consumption",
    "Total Objects Detected",
    "Average Model Processing Time (s)",
    "Average Image Processing Time (s)",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub metric: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub columns: Vec<String>,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn new(summaries: &[ExperimentSummary]) -> Self {
        let column = |f: fn(&ExperimentSummary) -> f64| summaries.iter().map(f).collect::<Vec<_>>();
        let values = [
            column(|s| s.total_processed as f64),
            column(|s| s.avg_confidence),
            column(|s| s.avg_cpu),
            column(|s| s.total_objects_detected as f64),
            column(|s| s.avg_model_processing_time),
            column(|s| s.avg_image_processing_time),
        ];
        Self {
            columns: summaries.iter().map(|s| s.experiment_id.clone()).collect(),
            rows: COMPARISON_METRICS
                .iter()
                .zip(values)
                .map(|(m, values)| ComparisonRow {
                    metric: m.to_string(),
                    values,
                })
                .collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let cells: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| r.values.iter().map(|v| format_value(*v)).collect())
            .collect();
        let label_w = self
            .rows
            .iter()
            .map(|r| r.metric.len())
            .chain(["Metric".len()])
            .max()
            .unwrap_or(0);
        let col_w: Vec<usize> = self
            .columns
            .iter()
            .enumerate()
            .map(|(j, c)| {
                cells
                    .iter()
                    .map(|row| row[j].len())
                    .chain([c.len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        let _ = write!(out, "{:<label_w$}", "Metric");
        for (c, w) in self.columns.iter().zip(&col_w) {
            let _ = write!(out, "  {c:>w$}");
        }
        out.push('\n');
        for (row, values) in self.rows.iter().zip(&cells) {
            let _ = write!(out, "{:<label_w$}", row.metric);
            for (v, w) in values.iter().zip(&col_w) {
                let _ = write!(out, "  {v:>w$}");
            }
            out.push('\n');
        }
        out
    }
}

/// Up to three decimals, trailing zeros trimmed.
fn format_value(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(model: &str, t: f64, kept: usize, conf: f64) -> MetricsRecord {
        MetricsRecord {
            log_id: 0,
            timestamp: t,
            request_no: 0,
            request_id: 0,
            model_name: model.into(),
            model_generation: 0,
            model_processing_time: 0.1,
            total_time: t / 10.0,
            absolute_time: t,
            arrival_time: t - 0.2,
            start_time: t - 0.1,
            finish_time: t,
            utility: 0.5,
            kept_count: kept,
            avg_confidence: conf,
            queue_depth_at_start: 0,
            cpu_load: Some(2.0),
        }
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.95), 19.0);
        assert_eq!(percentile(&v, 0.5), 10.0);
        assert_eq!(percentile(&v, 1.0), 20.0);
        assert_eq!(percentile(&[], 0.5), 0.0);
    }

    #[test]
    fn summary_aggregates() {
        let records = vec![
            rec("n", 1.0, 2, 0.6),
            rec("n", 2.0, 0, 0.0),
            rec("x", 4.0, 3, 0.8),
        ];
        let s = ExperimentSummary::from_records("e", &records);
        assert_eq!(s.total_processed, 3);
        assert!((s.avg_confidence - 0.7).abs() < 1e-12);
        assert_eq!(s.total_objects_detected, 5);
        assert_eq!(s.switches, 1);
        assert_eq!(s.duration, 4.0);
        assert!((s.avg_cpu - 6.0 / 4.0).abs() < 1e-12);
        assert!((s.avg_image_processing_time - 0.7 / 3.0).abs() < 1e-12);
        assert_eq!(
            ExperimentSummary::from_records("empty", &[]).total_processed,
            0
        );
    }

    #[test]
    fn table_text_and_json() {
        let a = ExperimentSummary {
            experiment_id: "AdaMLS".into(),
            total_processed: 10000,
            avg_confidence: 0.7,
            avg_cpu: 20.0,
            total_objects_detected: 47026,
            avg_model_processing_time: 0.033,
            avg_image_processing_time: 0.25,
            ..Default::default()
        };
        let b = ExperimentSummary {
            experiment_id: "Nano".into(),
            total_processed: 9000,
            avg_confidence: 0.65,
            ..Default::default()
        };
        let t = ComparisonTable::new(&[a, b]);
        let text = t.to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 7);
        assert!(lines[0].contains("AdaMLS") && lines[0].contains("Nano"));
        for (line, metric) in lines[1..].iter().zip(COMPARISON_METRICS) {
            assert!(line.starts_with(metric));
        }
        for v in ["10000", "0.7", "20", "47026", "0.033", "0.25", "0.65"] {
            assert!(
                text.split_whitespace().any(|w| w == v),
                "{v} missing from\n{text}"
            );
        }
        let json: ComparisonTable =
            serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        assert_eq!(json, t);
        assert_eq!(json.rows[0].values, vec![10000.0, 9000.0]);
    }
}
