//! Shard encoding pinned against checked-in golden files.
//! Regenerate with `UPDATE_GOLDEN=1 cargo test -p reasonforge-core --test records_golden`.

use std::fs;
use std::path::{Path, PathBuf};

use reasonforge::fixtures::sample_records;
use reasonforge::records::{read_shard, summary_path, write_shard, ShardSummary};

fn golden(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

fn check_golden(name: &str, actual: &str) {
    let path = golden(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::write(&path, actual).unwrap();
        return;
    }
    let expected = fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e}; run with UPDATE_GOLDEN=1 to create it", path.display()));
    assert_eq!(actual, expected, "{name} differs from the golden file");
}

#[test]
fn fifty_record_shard_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let shard = dir.path().join("shard-00000.jsonl");
    let samples = sample_records(50);
    let summary = write_shard(&samples, &shard).unwrap();
    check_golden("shard-50.jsonl", &fs::read_to_string(&shard).unwrap());
    check_golden("shard-50.summary.json", &fs::read_to_string(summary_path(&shard)).unwrap());

    assert_eq!(summary.count, 50);
    assert_eq!(read_shard(&shard).unwrap(), samples);
}

#[test]
fn summary_counts_every_part() {
    let samples = sample_records(50);
    let summary = ShardSummary::from_samples(&samples);
    let per_part: usize = reasonforge::records::Part::ALL.iter().map(|p| summary.part(*p)).sum();
    assert_eq!(per_part, 50);
}
