//! Tabulation of a manifest next to the published part sizes.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::Serialize;

use super::manifest::{EntryStatus, PipelineManifest};
use crate::records::Part;

/// Part sizes of the published dataset, used as the reference row.
pub const PUBLISHED_PART_COUNTS: [(Part, u64); 3] = [(Part::PartI, 8_013), (Part::PartII, 4_141), (Part::PartIII, 28_058)];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunStats {
    pub total: usize,
    pub part_counts: BTreeMap<Part, usize>,
    pub status_counts: BTreeMap<EntryStatus, usize>,
    /// Failure reason kind to count, Failed entries only.
    pub failure_histogram: BTreeMap<String, usize>,
}

pub fn stats(manifest: &PipelineManifest) -> RunStats {
    let mut part_counts: BTreeMap<Part, usize> = Part::ALL.iter().map(|p| (*p, 0)).collect();
    let mut failure_histogram = BTreeMap::new();
    for entry in manifest.entries.values() {
        match entry.status {
            EntryStatus::Done => *part_counts.entry(entry.part).or_default() += 1,
            EntryStatus::Failed => {
                let kind = entry.reason_kind().unwrap_or("unknown").to_string();
                *failure_histogram.entry(kind).or_default() += 1;
            }
            _ => {}
        }
    }
    RunStats {
        total: manifest.entries.len(),
        part_counts,
        status_counts: manifest.status_counts(),
        failure_histogram,
    }
}

/// `28058` → `28,058`.
pub fn thousands(n: u64) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

pub fn render_stats(stats: &RunStats) -> String {
    let mut out = String::new();
    let published_total: u64 = PUBLISHED_PART_COUNTS.iter().map(|(_, n)| n).sum();
    writeln!(out, "Samples per part").unwrap();
    writeln!(out, "{:<10} {:>10} {:>10}", "part", "local", "published").unwrap();
    for (part, reference) in PUBLISHED_PART_COUNTS {
        let local = stats.part_counts.get(&part).copied().unwrap_or(0) as u64;
        writeln!(out, "{:<10} {:>10} {:>10}", part.label(), thousands(local), thousands(reference)).unwrap();
    }
    let done: u64 = stats.part_counts.values().map(|&n| n as u64).sum();
    writeln!(out, "{:<10} {:>10} {:>10}", "total", thousands(done), thousands(published_total)).unwrap();

    writeln!(out, "\nStatus ({} entries)", stats.total).unwrap();
    for status in EntryStatus::ALL {
        let n = stats.status_counts.get(&status).copied().unwrap_or(0);
        writeln!(out, "{:<12} {:>8}", status.label(), n).unwrap();
    }

    writeln!(out, "\nFailures").unwrap();
    if stats.failure_histogram.is_empty() {
        writeln!(out, "(none)").unwrap();
    }
    for (kind, n) in &stats.failure_histogram {
        writeln!(out, "{kind:<24} {n:>8}").unwrap();
    }
    out
}
