//! Runs the built binary against fixture corpora.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn reasonforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reasonforge"))
        .args(args)
        .env_remove("REASONFORGE_LLM_URL")
        .env_remove("REASONFORGE_EDITOR_URL")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("terminated by signal")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Shards, journal and manifest with run ids and timestamps stripped.
fn tree(out: &Path) -> Vec<(PathBuf, String)> {
    let mut files = Vec::new();
    for entry in fs::read_dir(out.join("shards")).unwrap() {
        let p = entry.unwrap().path();
        files.push((p.clone(), fs::read_to_string(&p).unwrap()));
    }
    files.sort();
    let journal = out.join("journal.jsonl");
    files.push((journal.clone(), fs::read_to_string(&journal).unwrap()));
    let manifest = reasonforge::pipeline::PipelineManifest::load(&out.join("manifest.json")).unwrap();
    files.push((out.join("manifest.json"), manifest.comparable_json()));
    files
        .into_iter()
        .map(|(p, text)| (p.strip_prefix(out).unwrap().to_path_buf(), text))
        .collect()
}

#[test]
fn part_one_twice_gives_identical_trees() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    assert_eq!(code(&reasonforge(&["fixtures", "--out", path(&corpus)])), 0);
    let mut trees = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let run = reasonforge(&["gen", "part1", "--mock", "--seed", "7", "--in", path(&corpus), "--out", path(&out)]);
        assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
        trees.push(tree(&out));
    }
    assert!(!trees[0].is_empty());
    assert_eq!(trees[0], trees[1]);

    let stats = reasonforge(&["stats", "--out", path(&dir.path().join("a"))]);
    assert_eq!(code(&stats), 0);
    assert!(String::from_utf8_lossy(&stats.stdout).contains("8,013"));
}

#[test]
fn mock_evaluation_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("images");
    let bench = dir.path().join("bench");
    assert_eq!(code(&reasonforge(&["fixtures", "--out", path(&corpus), "--benchmark", "8"])), 0);
    let build = reasonforge(&["build-benchmark", "--mock", "--in", path(&corpus), "--out", path(&bench), "--n-images", "8"]);
    assert_eq!(code(&build), 0, "{}", String::from_utf8_lossy(&build.stderr));

    let eval = reasonforge(&["evaluate", "--mock", "--benchmark", path(&bench.join("benchmark.jsonl"))]);
    assert_eq!(code(&eval), 0, "{}", String::from_utf8_lossy(&eval.stderr));
    let text = fs::read_to_string(bench.join("report.txt")).unwrap();
    assert!(text.contains("Reasoning-tuned"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(bench.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["local"].as_array().unwrap().len(), 2);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&reasonforge(&["gen", "part1", "--mock", "--out", path(dir.path())])), 2);
    assert_eq!(code(&reasonforge(&["gen", "part1", "--no-such-flag"])), 2);
    let corpus = dir.path().join("corpus");
    assert_eq!(code(&reasonforge(&["fixtures", "--out", path(&corpus)])), 0);
    let no_endpoint = reasonforge(&["gen", "part1", "--in", path(&corpus), "--out", path(&dir.path().join("o"))]);
    assert_eq!(code(&no_endpoint), 2);
    assert!(String::from_utf8_lossy(&no_endpoint.stderr).contains("llm"));
    assert_eq!(code(&reasonforge(&["--set", "filter.tau=abc", "stats", "--out", path(dir.path())])), 2);
}

#[test]
fn user_study_counts_votes() {
    let dir = tempfile::tempdir().unwrap();
    let votes = dir.path().join("votes.csv");
    fs::write(&votes, "rater_id,sample_id,method\nr1,s1,Reasoning-tuned\nr2,s1,magicbrush\nr1,s2,Reasoning-tuned\n").unwrap();
    let run = reasonforge(&["user-study", "--votes", path(&votes)]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let text = String::from_utf8_lossy(&run.stdout).into_owned();
    let local = text.lines().find(|l| l.starts_with("local")).unwrap();
    let counts: Vec<&str> = local.split_whitespace().skip(1).collect();
    assert_eq!(counts, ["0", "1", "0", "2", "3"]);

    fs::write(&votes, "rater_id,sample_id,method\nr1,s1,Unheard\n").unwrap();
    assert_eq!(code(&reasonforge(&["user-study", "--votes", path(&votes)])), 1);
}
