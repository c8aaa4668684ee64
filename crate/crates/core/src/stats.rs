//! Action-usage accounting over evaluation traces.

use std::collections::BTreeMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::ExecutionTrace;
use crate::types::OpKind;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// One line of a trace file written by an evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub record_id: String,
    pub dataset: String,
    pub plan: Vec<OpKind>,
    pub trace: ExecutionTrace,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
}

pub fn read_trace_records<R: BufRead>(reader: R) -> Result<Vec<TraceRecord>, StatsError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| StatsError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Kinds counted in the report; the terminal answer step is excluded.
pub const COUNTED_KINDS: [OpKind; 4] = [
    OpKind::Retrieval,
    OpKind::RewriteQuery,
    OpKind::DecomposeQuery,
    OpKind::RefineDoc,
];

/// Per-dataset counts of planned operations, excluding `GenerateAnswer`.
pub fn count_actions(records: &[TraceRecord]) -> BTreeMap<String, [u64; 4]> {
    let mut out: BTreeMap<String, [u64; 4]> = BTreeMap::new();
    for r in records {
        let row = out.entry(r.dataset.clone()).or_default();
        for k in &r.plan {
            if let Some(i) = COUNTED_KINDS.iter().position(|c| c == k) {
                row[i] += 1;
            }
        }
    }
    out
}

/// `100·(after − before)/before`, undefined when `before` is 0.
pub fn delta_percent(before: u64, after: u64) -> Option<f64> {
    (before > 0).then(|| 100.0 * (after as f64 - before as f64) / before as f64)
}

/// One decimal place, or `--` when the delta is undefined.
pub fn format_delta(delta: Option<f64>) -> String {
    match delta {
        Some(d) => format!("{d:.1}"),
        None => "--".to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionUsageRow {
    pub dataset: String,
    pub action: OpKind,
    pub before: u64,
    pub after: u64,
    /// Full precision; `None` when `before` is 0.
    pub delta_percent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionUsageReport {
    pub label: String,
    pub rows: Vec<ActionUsageRow>,
}

impl ActionUsageReport {
    pub fn from_counts(
        label: impl Into<String>,
        before: &BTreeMap<String, [u64; 4]>,
        after: &BTreeMap<String, [u64; 4]>,
    ) -> Self {
        let mut datasets: Vec<&String> = before.keys().chain(after.keys()).collect();
        datasets.sort();
        datasets.dedup();
        let mut rows = Vec::new();
        for d in datasets {
            let b = before.get(d).copied().unwrap_or_default();
            let a = after.get(d).copied().unwrap_or_default();
            for (i, kind) in COUNTED_KINDS.iter().enumerate() {
                rows.push(ActionUsageRow {
                    dataset: d.clone(),
                    action: *kind,
                    before: b[i],
                    after: a[i],
                    delta_percent: delta_percent(b[i], a[i]),
                });
            }
        }
        Self {
            label: label.into(),
            rows,
        }
    }

    pub fn from_records(label: impl Into<String>, before: &[TraceRecord], after: &[TraceRecord]) -> Self {
        Self::from_counts(label, &count_actions(before), &count_actions(after))
    }

    pub fn render_table(&self) -> String {
        let mut out = format!("# {}\n", self.label);
        out.push_str(&format!(
            "{:<12} {:<16} {:>8} {:>8} {:>8}\n",
            "Dataset", "Action", "Before", "After", "Delta(%)"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<12} {:<16} {:>8} {:>8} {:>8}\n",
                r.dataset,
                r.action.name(),
                r.before,
                r.after,
                format_delta(r.delta_percent)
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_rows() {
        let rows = [
            (310, 138, "-55.5"),
            (12, 0, "-100.0"),
            (2, 1, "-50.0"),
            (3, 0, "-100.0"),
            (1563, 491, "-68.6"),
            (86, 43, "-50.0"),
            (14, 11, "-21.4"),
            (20, 7, "-65.0"),
            (8, 7, "-12.5"),
            (0, 0, "--"),
        ];
        for (b, a, want) in rows {
            assert_eq!(format_delta(delta_percent(b, a)), want, "{b} -> {a}");
        }
        assert_eq!(format_delta(delta_percent(4, 5)), "25.0");
    }

    fn rec(dataset: &str, plan: &[OpKind]) -> TraceRecord {
        TraceRecord {
            record_id: "r".into(),
            dataset: dataset.into(),
            plan: plan.to_vec(),
            trace: ExecutionTrace {
                steps: vec![],
                final_answer: "x".into(),
                fell_back: false,
            },
            f1: None,
        }
    }

    #[test]
    fn counts_skip_terminal_step() {
        use OpKind::*;
        let before = vec![
            rec("nq", &[RewriteQuery, Retrieval, GenerateAnswer]),
            rec("nq", &[Retrieval, RefineDoc, GenerateAnswer]),
            rec("wow", &[GenerateAnswer]),
        ];
        let after = vec![rec("nq", &[Retrieval, GenerateAnswer]), rec("wow", &[GenerateAnswer])];
        let report = ActionUsageReport::from_records("test", &before, &after);
        assert_eq!(report.rows.len(), 8);
        let nq_retrieval = &report.rows[0];
        assert_eq!((nq_retrieval.before, nq_retrieval.after), (2, 1));
        assert_eq!(nq_retrieval.delta_percent, Some(-50.0));
        assert!(report.rows[4..].iter().all(|r| r.before == 0 && r.delta_percent.is_none()));
        let table = report.render_table();
        assert!(table.contains("RewriteQuery"));
        assert!(table.contains("--"));
    }

    #[test]
    fn trace_lines_round_trip() {
        let r = rec("nq", &[OpKind::Retrieval, OpKind::GenerateAnswer]);
        let line = serde_json::to_string(&r).unwrap();
        let parsed = read_trace_records(format!("{line}\n\n{line}\n").as_bytes()).unwrap();
        assert_eq!(parsed, vec![r.clone(), r]);
        assert!(read_trace_records("{oops".as_bytes()).is_err());
    }
}
