//! Text and JSON rendering of metric reports next to the published numbers.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::Serialize;
use serde_json::{json, Value};

use super::metrics::{Aggregate, InstructionKind, MetricReport};

/// Label used for the reasoning-tuned editor in the reference tables.
pub const REFERENCE_METHOD: &str = "Reasoning-tuned";

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReferenceRow {
    pub method: &'static str,
    /// L1, L2, CLIP-I, DINO, CLIP-T.
    pub direct: [f64; 5],
    pub reasoning: [f64; 5],
}

pub const PUBLISHED_RESULTS: [ReferenceRow; 6] = [
    ReferenceRow {
        method: "Null-text",
        direct: [0.0931, 0.0354, 0.8542, 0.8036, 0.2479],
        reasoning: [0.2637, 0.1165, 0.6326, 0.5249, 0.1706],
    },
    ReferenceRow {
        method: "InstructPix2Pix",
        direct: [0.1265, 0.0423, 0.8042, 0.7256, 0.2465],
        reasoning: [0.2984, 0.1385, 0.6034, 0.5142, 0.1629],
    },
    ReferenceRow {
        method: "MagicBrush",
        direct: [0.0706, 0.0247, 0.9127, 0.8745, 0.2568],
        reasoning: [0.2239, 0.0938, 0.6755, 0.6125, 0.1941],
    },
    ReferenceRow {
        method: "EDICT",
        direct: [0.1149, 0.0385, 0.8137, 0.7485, 0.2490],
        reasoning: [0.2753, 0.1296, 0.6282, 0.5526, 0.1703],
    },
    ReferenceRow {
        method: "InstructDiffusion",
        direct: [0.0824, 0.0295, 0.8873, 0.8461, 0.2506],
        reasoning: [0.2145, 0.0863, 0.6904, 0.6375, 0.2046],
    },
    ReferenceRow {
        method: REFERENCE_METHOD,
        direct: [0.0646, 0.0203, 0.9246, 0.8920, 0.2553],
        reasoning: [0.1347, 0.0476, 0.7824, 0.7216, 0.2350],
    },
];

const COLUMNS: [&str; 5] = ["L1", "L2", "CLIP-I", "DINO", "CLIP-T"];

fn columns(agg: &Aggregate) -> [f64; 5] {
    [agg.l1, agg.l2, agg.clip_i, agg.dino, agg.clip_t]
}

fn cells(values: Option<[f64; 5]>) -> String {
    match values {
        Some(v) => v.iter().map(|x| format!("{x:>8.4}")).collect::<Vec<_>>().join(" "),
        None => (0..5).map(|_| format!("{:>8}", "-")).collect::<Vec<_>>().join(" "),
    }
}

/// Local rows grouped by predictor, followed by the reference rows.
pub fn render_report(reports: &[MetricReport]) -> String {
    let mut by_predictor: BTreeMap<&str, BTreeMap<InstructionKind, &MetricReport>> = BTreeMap::new();
    for report in reports {
        by_predictor
            .entry(report.predictor.as_str())
            .or_default()
            .insert(report.kind, report);
    }
    let width = by_predictor
        .keys()
        .map(|k| k.len())
        .chain(PUBLISHED_RESULTS.iter().map(|r| r.method.len()))
        .max()
        .unwrap_or(6)
        .max(6);
    let header_cols = COLUMNS.iter().map(|c| format!("{c:>8}")).collect::<Vec<_>>().join(" ");
    let block = 5 * 9 - 1;

    let mut out = String::new();
    writeln!(out, "{:<width$} | {:<block$} | {:<block$}", "", "Direct instruction", "Reasoning instruction").unwrap();
    writeln!(out, "{:<width$} | {header_cols} | {header_cols}", "method").unwrap();
    let rule = format!("{}-+-{}-+-{}", "-".repeat(width), "-".repeat(block), "-".repeat(block));
    writeln!(out, "{rule}").unwrap();
    for (predictor, kinds) in &by_predictor {
        let agg = |kind| kinds.get(&kind).and_then(|r| r.aggregate.as_ref()).map(columns);
        writeln!(
            out,
            "{predictor:<width$} | {} | {}",
            cells(agg(InstructionKind::Direct)),
            cells(agg(InstructionKind::Reasoning))
        )
        .unwrap();
    }
    if !by_predictor.is_empty() {
        writeln!(out, "{rule}").unwrap();
    }
    for row in PUBLISHED_RESULTS {
        writeln!(out, "{:<width$} | {} | {}", row.method, cells(Some(row.direct)), cells(Some(row.reasoning))).unwrap();
    }
    writeln!(out, "(rows below the rule are published reference values)").unwrap();

    for (predictor, kinds) in &by_predictor {
        for (kind, report) in kinds {
            writeln!(
                out,
                "{predictor} / {}: {} evaluated, {} missing (excluded from means)",
                kind.label(),
                report.rows.len(),
                report.missing.len()
            )
            .unwrap();
        }
    }
    out
}

pub fn report_json(reports: &[MetricReport]) -> Value {
    json!({
        "columns": COLUMNS,
        "local": reports,
        "reference": PUBLISHED_RESULTS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_rows_rendered_verbatim() {
        let text = render_report(&[]);
        assert!(text.contains("  0.0646   0.0203   0.9246   0.8920   0.2553"));
        assert!(text.contains("  0.1347   0.0476   0.7824   0.7216   0.2350"));
    }

    #[test]
    fn missing_aggregate_renders_dashes() {
        let report = MetricReport {
            kind: InstructionKind::Direct,
            predictor: "p".into(),
            canonical_size: 8,
            rows: vec![],
            missing: vec![],
            aggregate: None,
        };
        let text = render_report(&[report]);
        assert!(text.contains("p / direct: 0 evaluated, 0 missing"));
    }
}
