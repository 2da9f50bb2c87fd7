//! Best-of-four vote counting.
//!
//! Votes are CSV with the header `rater_id,sample_id,method`.

use std::fmt::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::report::REFERENCE_METHOD;
use super::EvalError;

pub const STUDY_METHODS: [&str; 4] = ["InstructPix2Pix", "MagicBrush", "InstructDiffusion", REFERENCE_METHOD];

/// Published choice counts out of 100, in [`STUDY_METHODS`] order, for direct
/// then reasoning instructions.
pub const PUBLISHED_USER_STUDY: [(&str, [u64; 4]); 2] = [("direct", [16, 21, 28, 35]), ("reasoning", [13, 15, 18, 54])];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub rater_id: String,
    pub sample_id: String,
    pub method: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FrequencyTable {
    pub methods: Vec<String>,
    pub counts: Vec<u64>,
    pub total: u64,
}

impl FrequencyTable {
    pub fn count(&self, method: &str) -> Option<u64> {
        self.methods.iter().position(|m| m == method).map(|i| self.counts[i])
    }
}

pub fn read_votes(path: &Path) -> Result<Vec<Vote>, EvalError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| EvalError::Malformed {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
    let mut votes = Vec::new();
    for (idx, record) in reader.deserialize::<Vote>().enumerate() {
        let vote = record.map_err(|e| EvalError::Malformed {
            path: path.to_path_buf(),
            line: e.position().map(|p| p.line() as usize).unwrap_or(idx + 2),
            message: e.to_string(),
        })?;
        votes.push(vote);
    }
    Ok(votes)
}

/// Counts votes per method. Method names match case-insensitively; a vote
/// for a method outside `methods` is an error.
pub fn tabulate_user_study(votes: &[Vote], methods: &[String]) -> Result<FrequencyTable, EvalError> {
    let mut counts = vec![0u64; methods.len()];
    for (index, vote) in votes.iter().enumerate() {
        let slot = methods
            .iter()
            .position(|m| m.eq_ignore_ascii_case(vote.method.trim()))
            .ok_or_else(|| EvalError::UnknownMethod {
                index,
                method: vote.method.clone(),
            })?;
        counts[slot] += 1;
    }
    Ok(FrequencyTable {
        methods: methods.to_vec(),
        counts,
        total: votes.len() as u64,
    })
}

/// The local table followed by the published rows when the method list is
/// the standard one.
pub fn render_user_study(table: &FrequencyTable, label: &str) -> String {
    let width = table
        .methods
        .iter()
        .map(|m| m.len())
        .chain(STUDY_METHODS.iter().map(|m| m.len()))
        .max()
        .unwrap_or(0)
        .max(8);
    let label_width = label.len().max("published reasoning".len());
    let mut out = String::new();
    let header = table.methods.iter().map(|m| format!("{m:>width$}")).collect::<Vec<_>>().join(" ");
    writeln!(out, "{:<label_width$} {header} {:>8}", "", "total").unwrap();
    let counts = table.counts.iter().map(|c| format!("{c:>width$}")).collect::<Vec<_>>().join(" ");
    writeln!(out, "{label:<label_width$} {counts} {:>8}", table.total).unwrap();
    if table.methods.iter().map(String::as_str).eq(STUDY_METHODS) {
        for (kind, row) in PUBLISHED_USER_STUDY {
            let cells = row.iter().map(|c| format!("{c:>width$}")).collect::<Vec<_>>().join(" ");
            let name = format!("published {kind}");
            writeln!(out, "{name:<label_width$} {cells} {:>8}", row.iter().sum::<u64>()).unwrap();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn methods() -> Vec<String> {
        STUDY_METHODS.iter().map(|s| s.to_string()).collect()
    }

    fn vote(method: &str) -> Vote {
        Vote {
            rater_id: "r".into(),
            sample_id: "s".into(),
            method: method.into(),
        }
    }

    #[test]
    fn unanimous_votes() {
        let votes = vec![vote("MagicBrush"); 100];
        let table = tabulate_user_study(&votes, &methods()).unwrap();
        assert_eq!(table.counts, vec![0, 100, 0, 0]);
    }

    #[test]
    fn empty_votes() {
        let table = tabulate_user_study(&[], &methods()).unwrap();
        assert_eq!(table.counts, vec![0; 4]);
        assert_eq!(table.total, 0);
    }

    #[test]
    fn unknown_method_rejected() {
        let err = tabulate_user_study(&[vote("DALL-E")], &methods()).unwrap_err();
        assert!(matches!(err, EvalError::UnknownMethod { index: 0, .. }));
    }

    #[test]
    fn reference_rows_rendered() {
        let table = tabulate_user_study(&[], &methods()).unwrap();
        let text = render_user_study(&table, "local");
        assert!(text.contains("35"));
        assert!(text.contains("54"));
    }

    proptest! {
        #[test]
        fn counts_partition_total(picks in prop::collection::vec(0usize..4, 0..200)) {
            let votes: Vec<Vote> = picks.iter().map(|&i| vote(STUDY_METHODS[i])).collect();
            let table = tabulate_user_study(&votes, &methods()).unwrap();
            prop_assert_eq!(table.counts.iter().sum::<u64>(), table.total);
            prop_assert_eq!(table.total, votes.len() as u64);
        }
    }
}
