//! Trace files: one inter-arrival gap in seconds per line, optional `gap`
//! header, blank lines ignored.

use std::fmt::Write as _;

use crate::domain::ArrivalTrace;

use super::TraceError;

pub fn parse_trace(text: &str, source_label: &str) -> Result<ArrivalTrace, TraceError> {
    let mut gaps = Vec::new();
    let mut seen_content = false;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if !seen_content {
            seen_content = true;
            if line.eq_ignore_ascii_case("gap") {
                continue;
            }
        }
        let gap: f64 = line
            .parse()
            .ok()
            .filter(|g: &f64| g.is_finite())
            .ok_or(TraceError::NonNumeric(i + 1))?;
        if gap < 0.0 {
            return Err(TraceError::NegativeGap(i + 1));
        }
        gaps.push(gap);
    }
    if gaps.is_empty() {
        return Err(TraceError::EmptyTrace);
    }
    Ok(ArrivalTrace::new(gaps, source_label))
}

/// Inverse of [`parse_trace`]: shortest round-trip formatting, so parsing
/// the output gives the same gaps bit for bit.
pub fn render_trace(trace: &ArrivalTrace) -> String {
    let mut out = String::from("gap\n");
    for g in &trace.gaps {
        let _ = writeln!(out, "{g}");
    }
    out
}

/// Divides every gap by `factor`, multiplying the request rate by it.
pub fn scale_trace(trace: &ArrivalTrace, factor: f64) -> Result<ArrivalTrace, TraceError> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(TraceError::NonPositiveFactor(factor));
    }
    Ok(ArrivalTrace::new(
        trace.gaps.iter().map(|g| g / factor).collect(),
        format!("{} x{factor}", trace.source_label),
    ))
}

/// Converts per-interval request counts (`timestamp,count` rows, as in
/// aggregated web-server logs) into gaps. Each row's requests are spread
/// evenly over its interval; the last interval is taken to be as long as
/// the one before it (1 s for a single row).
pub fn import_counts(text: &str, source_label: &str) -> Result<ArrivalTrace, TraceError> {
    let mut rows: Vec<(f64, u64)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut cols = line.split([',', ' ', '\t']).filter(|c| !c.is_empty());
        let (Some(t), Some(c), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(TraceError::NonNumeric(i + 1));
        };
        let (Ok(t), Ok(c)) = (t.parse::<f64>(), c.parse::<u64>()) else {
            if rows.is_empty() && t.parse::<f64>().is_err() {
                // header row
                continue;
            }
            return Err(TraceError::NonNumeric(i + 1));
        };
        if !t.is_finite() {
            return Err(TraceError::NonNumeric(i + 1));
        }
        if rows.last().is_some_and(|(prev, _)| t <= *prev) {
            return Err(TraceError::NegativeGap(i + 1));
        }
        rows.push((t, c));
    }
    if rows.is_empty() {
        return Err(TraceError::EmptyTrace);
    }
    let mut times = Vec::new();
    for (k, &(t, count)) in rows.iter().enumerate() {
        let width = match (rows.get(k + 1), k.checked_sub(1).map(|j| rows[j])) {
            (Some(&(next, _)), _) => next - t,
            (None, Some((prev, _))) => t - prev,
            (None, None) => 1.0,
        };
        for j in 0..count {
            times.push(t + width * j as f64 / count as f64);
        }
    }
    if times.is_empty() {
        return Err(TraceError::EmptyTrace);
    }
    let origin = rows[0].0;
    let mut prev = origin;
    let gaps = times
        .into_iter()
        .map(|t| {
            let g = (t - prev).max(0.0);
            prev = t;
            g
        })
        .collect();
    Ok(ArrivalTrace::new(gaps, source_label))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parse_examples() {
        let t = parse_trace("0.5\n0.2\n0.3\n", "t").unwrap();
        assert_eq!(t.gaps, vec![0.5, 0.2, 0.3]);
        let h = parse_trace("gap\n\n0.1\n  \n0.2", "t").unwrap();
        assert_eq!(h.gaps, vec![0.1, 0.2]);
        assert!(matches!(
            parse_trace("0.1\n-0.2\n", "t"),
            Err(TraceError::NegativeGap(2))
        ));
        assert!(matches!(
            parse_trace("0.1\nabc\n", "t"),
            Err(TraceError::NonNumeric(2))
        ));
        assert!(matches!(
            parse_trace("0.1\ninf\n", "t"),
            Err(TraceError::NonNumeric(2))
        ));
        assert!(matches!(
            parse_trace("gap\n\n", "t"),
            Err(TraceError::EmptyTrace)
        ));
        assert!(matches!(parse_trace("", "t"), Err(TraceError::EmptyTrace)));
    }

    #[test]
    fn scale_examples() {
        let t = ArrivalTrace::new(vec![1.0, 2.0], "t");
        assert_eq!(scale_trace(&t, 2.0).unwrap().gaps, vec![0.5, 1.0]);
        assert!(matches!(
            scale_trace(&t, 0.0),
            Err(TraceError::NonPositiveFactor(_))
        ));
        assert!(matches!(
            scale_trace(&t, -1.0),
            Err(TraceError::NonPositiveFactor(_))
        ));
    }

    #[test]
    fn counts_import() {
        let t = import_counts("time,count\n0,2\n1,0\n2,4\n", "fifa").unwrap();
        assert_eq!(t.len(), 6);
        // 0.0, 0.5 | 2.0, 2.25, 2.5, 2.75
        let expect = [0.0, 0.5, 1.5, 0.25, 0.25, 0.25];
        for (g, e) in t.gaps.iter().zip(expect) {
            assert!((g - e).abs() < 1e-12);
        }
        assert!(matches!(
            import_counts("0,1\n0,1\n", "f"),
            Err(TraceError::NegativeGap(2))
        ));
        assert!(matches!(
            import_counts("0,0\n", "f"),
            Err(TraceError::EmptyTrace)
        ));
    }

    proptest! {
        #[test]
        fn render_parse_identity(gaps in proptest::collection::vec(0.0f64..1e6, 1..200)) {
            let t = ArrivalTrace::new(gaps, "p");
            let back = parse_trace(&render_trace(&t), "p").unwrap();
            prop_assert_eq!(back.gaps, t.gaps);
        }

        #[test]
        fn scaling_inverts_rate(gaps in proptest::collection::vec(0.001f64..10.0, 1..100), k in 0.01f64..100.0) {
            let t = ArrivalTrace::new(gaps, "p");
            let s = scale_trace(&t, k).unwrap();
            let ratio = t.duration() / s.duration();
            prop_assert!((ratio - k).abs() <= 1e-9 * k);
        }
    }
}
