//! Runs the stages over a corpus with crash-safe, resumable bookkeeping.
//!
//! Output directory layout:
//!
//! ```text
//! run.json               resolved configuration, backend versions, template hashes
//! manifest.json          PipelineManifest
//! journal.jsonl          write-ahead log of terminal sample outcomes
//! filter.json            divergence pre-pass (when Part I or filtered Part II runs)
//! shards/shard-NNNNN.jsonl + .summary.json
//! images/<sample id>/... input and edited images
//! stats.txt
//! ```
//!
//! Workers process samples concurrently; the driver commits their results
//! to the journal in plan order, so the journal, manifest and shards do not
//! depend on the parallelism level or on where a previous run stopped.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::manifest::{write_atomic, EntryStatus, Journal, JournalRecord, ManifestEntry, PipelineManifest};
use super::source::{Corpus, SourcePair};
use super::stages::{run_part1, run_part23, sample_id, Artifact, StageContext, StageFailure, StageOutput};
use super::stats::{render_stats, stats};
use super::{GenerationConfig, PipelineError};
use crate::backends::BackendSuite;
use crate::hashing::json_hash;
use crate::imaging::{apply_filter, divergence, encode_png, load_canonical, FilterConfig, DIVERGENCE_CONVENTION};
use crate::prompts::PromptSet;
use crate::records::{write_shard, EditSample, Part};

pub const RUN_FILE: &str = "run.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const JOURNAL_FILE: &str = "journal.jsonl";
pub const FILTER_FILE: &str = "filter.json";
pub const STATS_FILE: &str = "stats.txt";
pub const SHARD_DIR: &str = "shards";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanItem {
    pub id: String,
    /// Index into the corpus sources.
    pub source: usize,
    pub part: Part,
}

/// Samples to produce, in corpus order and part order within a source.
pub fn plan(corpus: &Corpus, parts: &BTreeSet<Part>) -> Vec<PlanItem> {
    corpus
        .sources
        .iter()
        .enumerate()
        .flat_map(|(idx, source)| {
            source
                .parts(corpus.dataset)
                .into_iter()
                .filter(|p| parts.contains(p))
                .map(move |part| PlanItem {
                    id: sample_id(&source.source_id, part),
                    source: idx,
                    part,
                })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub config: FilterConfig,
    pub convention: String,
    /// Source id to divergence, for every source with an edited image.
    pub divergences: BTreeMap<String, f64>,
    pub kept: BTreeSet<String>,
    pub abandoned: BTreeSet<String>,
    /// Sources whose images could not be loaded; they are neither kept nor
    /// abandoned.
    pub errors: BTreeMap<String, String>,
}

impl FilterReport {
    pub fn is_abandoned(&self, source_id: &str) -> bool {
        self.abandoned.contains(source_id)
    }
}

pub(crate) fn parallel_map<T, R, F>(items: &[T], parallelism: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let next = AtomicUsize::new(0);
    let mut out: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        for _ in 0..parallelism.clamp(1, items.len().max(1)) {
            let tx = tx.clone();
            let (next, f) = (&next, &f);
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                if tx.send((i, f(&items[i]))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, r) in rx {
            out[i] = Some(r);
        }
    });
    out.into_iter().map(|r| r.expect("every item processed")).collect()
}

/// Divergence pre-pass over every source that has an edited image.
pub fn filter_corpus(corpus: &Corpus, cfg: &FilterConfig, parallelism: usize) -> FilterReport {
    let pairs: Vec<&SourcePair> = corpus.sources.iter().filter(|s| s.edited_image.is_some()).collect();
    let results = parallel_map(&pairs, parallelism, |source| {
        let edited = source.edited_image.as_ref().expect("filtered above");
        let a = load_canonical(&source.input_image.resolve(&corpus.root), cfg.canonical_size)?;
        let b = load_canonical(&edited.resolve(&corpus.root), cfg.canonical_size)?;
        divergence(&a, &b)
    });
    let mut divergences = BTreeMap::new();
    let mut errors = BTreeMap::new();
    for (source, result) in pairs.iter().zip(results) {
        match result {
            Ok(d) => {
                divergences.insert(source.source_id.clone(), d);
            }
            Err(e) => {
                errors.insert(source.source_id.clone(), e.to_string());
            }
        }
    }
    let scored: Vec<(String, f64)> = divergences.iter().map(|(k, v)| (k.clone(), *v)).collect();
    let outcome = apply_filter(&scored, cfg.mode);
    FilterReport {
        config: *cfg,
        convention: DIVERGENCE_CONVENTION.to_string(),
        divergences,
        kept: outcome.kept,
        abandoned: outcome.abandoned,
        errors,
    }
}

#[derive(Serialize)]
struct HashMaterial<'a> {
    generation: &'a GenerationConfig,
    parts: &'a BTreeSet<Part>,
    backends: BTreeMap<String, String>,
    prompts: BTreeMap<String, String>,
    corpus: &'a str,
    extras: &'a BTreeMap<String, String>,
}

/// Hash of everything that determines the output: generation settings,
/// requested parts, backend versions, prompt templates, the corpus file and
/// caller-supplied extras such as endpoint URLs.
pub fn config_hash(
    cfg: &GenerationConfig,
    parts: &BTreeSet<Part>,
    suite: &BackendSuite,
    prompts: &PromptSet,
    corpus: &Corpus,
    extras: &BTreeMap<String, String>,
) -> String {
    json_hash(&HashMaterial {
        generation: cfg,
        parts,
        backends: suite.versions(),
        prompts: prompts.hashes(),
        corpus: &corpus.file_hash,
        extras,
    })
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub parallelism: usize,
    /// Stop after committing this many outcomes, as if the process died.
    pub halt_after: Option<usize>,
    /// Extra values folded into the config hash.
    pub hash_extras: BTreeMap<String, String>,
    /// Resolved caller configuration recorded in `run.json`. Must not carry
    /// credentials.
    pub run_config: Value,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        RunOptions {
            out_dir: out_dir.into(),
            parallelism: 1,
            halt_after: None,
            hash_extras: BTreeMap::new(),
            run_config: Value::Null,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: PipelineManifest,
    /// True when `halt_after` stopped the run early.
    pub halted: bool,
    pub filter: Option<FilterReport>,
    pub shard_paths: Vec<PathBuf>,
}

enum Work {
    Filtered(String),
    Stage,
}

fn commit_entry(result: &Result<StageOutput, StageFailure>, item: &PlanItem, source_id: &str) -> JournalRecord {
    match result {
        Ok(out) => JournalRecord {
            id: item.id.clone(),
            entry: ManifestEntry {
                status: EntryStatus::Done,
                part: item.part,
                source_id: source_id.to_string(),
                cache_keys: out.trace.cache_keys.clone(),
                warnings: out.trace.warnings.clone(),
                reason: None,
            },
            sample: Some(out.sample.clone()),
        },
        Err(failure) => JournalRecord {
            id: item.id.clone(),
            entry: ManifestEntry {
                status: EntryStatus::Failed,
                part: item.part,
                source_id: source_id.to_string(),
                cache_keys: failure.trace.cache_keys.clone(),
                warnings: failure.trace.warnings.clone(),
                reason: Some(failure.reason.clone()),
            },
            sample: None,
        },
    }
}

pub(crate) fn materialize(out_dir: &Path, artifacts: &[Artifact]) -> Result<(), String> {
    for artifact in artifacts {
        let dest = out_dir.join(artifact.destination());
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent).map_err(|e| format!("{}: {e}", parent.display()))?;
        }
        match artifact {
            Artifact::Copy { from, .. } => {
                fs::copy(from, &dest).map_err(|e| format!("{}: {e}", from.display()))?;
            }
            Artifact::Png { picture, .. } => {
                let bytes = encode_png(&picture.rgb).map_err(|e| e.to_string())?;
                fs::write(&dest, bytes).map_err(|e| format!("{}: {e}", dest.display()))?;
            }
        }
    }
    Ok(())
}

fn run_stage(item: &PlanItem, source: &SourcePair, ctx: StageContext<'_>, out_dir: &Path) -> Result<StageOutput, StageFailure> {
    let output = match item.part {
        Part::PartI => run_part1(source, ctx),
        part => run_part23(source, part, ctx),
    }?;
    if let Err(e) = output.sample.validate() {
        return Err(StageFailure {
            reason: format!("invalid sample: {e}"),
            trace: output.trace,
        });
    }
    if let Err(e) = materialize(out_dir, &output.artifacts) {
        return Err(StageFailure {
            reason: format!("output: {e}"),
            trace: output.trace,
        });
    }
    Ok(output)
}

fn read_recorded_hash(out_dir: &Path) -> Result<Option<String>, PipelineError> {
    for file in [MANIFEST_FILE, RUN_FILE] {
        let path = out_dir.join(file);
        if !path.exists() {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Manifest(format!("{}: {e}", path.display())))?;
        if let Some(hash) = value.get("config_hash").and_then(Value::as_str) {
            return Ok(Some(hash.to_string()));
        }
    }
    Ok(None)
}

/// Runs `parts` over `corpus`, resuming from whatever `opts.out_dir` already
/// holds.
pub fn orchestrate(
    corpus: &Corpus,
    parts: &BTreeSet<Part>,
    suite: &BackendSuite,
    prompts: &PromptSet,
    cfg: &GenerationConfig,
    opts: &RunOptions,
) -> Result<RunOutcome, PipelineError> {
    cfg.validate()?;
    let out_dir = &opts.out_dir;
    fs::create_dir_all(out_dir).map_err(|e| PipelineError::io(out_dir, e))?;
    let hash = config_hash(cfg, parts, suite, prompts, corpus, &opts.hash_extras);
    if let Some(found) = read_recorded_hash(out_dir)? {
        if found != hash {
            return Err(PipelineError::ConfigMismatch { expected: hash, found });
        }
    }

    let manifest_path = out_dir.join(MANIFEST_FILE);
    let mut manifest = if manifest_path.exists() {
        PipelineManifest::load(&manifest_path)?
    } else {
        PipelineManifest::new(hash.clone())
    };
    let items = plan(corpus, parts);
    for item in &items {
        manifest.register(&item.id, item.part, &corpus.sources[item.source].source_id);
    }

    let run_record = json!({
        "run_id": manifest.run_id,
        "config_hash": hash,
        "config": opts.run_config,
        "generation": cfg,
        "parts": parts,
        "backends": suite.versions(),
        "prompts": prompts.hashes(),
        "corpus": {
            "dataset": corpus.dataset,
            "root": corpus.root.display().to_string(),
            "file_hash": corpus.file_hash,
            "sources": corpus.sources.len(),
        },
        "divergence": DIVERGENCE_CONVENTION,
    });
    write_atomic(
        &out_dir.join(RUN_FILE),
        format!("{}\n", serde_json::to_string_pretty(&run_record).expect("run record serializes")).as_bytes(),
    )?;
    manifest.save(&manifest_path)?;

    let journal_path = out_dir.join(JOURNAL_FILE);
    let mut samples: HashMap<String, EditSample> = HashMap::new();
    for record in Journal::replay(&journal_path)? {
        manifest.transition(&record.id, record.entry)?;
        if let Some(sample) = record.sample {
            samples.insert(record.id, sample);
        }
    }
    let pending: Vec<&PlanItem> = items
        .iter()
        .filter(|i| manifest.entries[&i.id].status == EntryStatus::Pending)
        .collect();

    let needs_filter = pending
        .iter()
        .any(|i| i.part == Part::PartI || (i.part == Part::PartII && !cfg.part2_unfiltered));
    let filter = if needs_filter {
        let report = filter_corpus(corpus, &cfg.filter, opts.parallelism);
        write_atomic(
            &out_dir.join(FILTER_FILE),
            format!("{}\n", serde_json::to_string_pretty(&report).expect("filter report serializes")).as_bytes(),
        )?;
        Some(report)
    } else {
        None
    };
    let work: Vec<Work> = pending
        .iter()
        .map(|item| {
            let source = &corpus.sources[item.source];
            let gated = item.part == Part::PartI
                || (item.part == Part::PartII && !cfg.part2_unfiltered && source.edited_image.is_some());
            match &filter {
                Some(report) if gated && report.is_abandoned(&source.source_id) => Work::Filtered(format!(
                    "filtered: divergence {:.6} below the filter threshold",
                    report.divergences[&source.source_id]
                )),
                _ => Work::Stage,
            }
        })
        .collect();

    let ctx = StageContext {
        suite,
        prompts,
        cfg,
        dataset: corpus.dataset,
        corpus_root: &corpus.root,
    };
    let mut journal = Journal::open(&journal_path)?;
    let stop = AtomicBool::new(false);
    let next = AtomicUsize::new(0);
    let mut committed = 0usize;
    let mut halted = false;
    let mut failure: Option<PipelineError> = None;
    let (tx, rx) = mpsc::channel::<(usize, JournalRecord)>();
    std::thread::scope(|scope| {
        for _ in 0..opts.parallelism.clamp(1, pending.len().max(1)) {
            let tx = tx.clone();
            let (stop, next, pending, work) = (&stop, &next, &pending, &work);
            scope.spawn(move || loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= pending.len() {
                    break;
                }
                let item = pending[i];
                let source = &corpus.sources[item.source];
                let record = match &work[i] {
                    Work::Filtered(reason) => JournalRecord {
                        id: item.id.clone(),
                        entry: ManifestEntry {
                            status: EntryStatus::FilteredOut,
                            reason: Some(reason.clone()),
                            ..ManifestEntry::pending(item.part, &source.source_id)
                        },
                        sample: None,
                    },
                    Work::Stage => commit_entry(&run_stage(item, source, ctx, out_dir), item, &source.source_id),
                };
                if tx.send((i, record)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        let mut buffer: BTreeMap<usize, JournalRecord> = BTreeMap::new();
        let mut cursor = 0usize;
        for (i, record) in rx.iter() {
            buffer.insert(i, record);
            while let Some(record) = buffer.remove(&cursor) {
                cursor += 1;
                let outcome = journal.append(&record).and_then(|_| {
                    manifest.transition(&record.id, record.entry.clone())
                });
                if let Err(e) = outcome {
                    failure = Some(e);
                    stop.store(true, Ordering::SeqCst);
                    return;
                }
                log::info!("{} -> {}", record.id, record.entry.status.label());
                if let Some(sample) = record.sample {
                    samples.insert(record.id, sample);
                }
                committed += 1;
                if opts.halt_after.is_some_and(|limit| committed >= limit) && cursor < pending.len() {
                    halted = true;
                    stop.store(true, Ordering::SeqCst);
                    return;
                }
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if halted {
        manifest.save(&manifest_path)?;
        return Ok(RunOutcome {
            manifest,
            halted: true,
            filter,
            shard_paths: Vec::new(),
        });
    }

    let done: Vec<EditSample> = items
        .iter()
        .filter_map(|item| samples.remove(&item.id))
        .collect();
    let shard_dir = out_dir.join(SHARD_DIR);
    if shard_dir.exists() {
        fs::remove_dir_all(&shard_dir).map_err(|e| PipelineError::io(&shard_dir, e))?;
    }
    let mut shard_paths = Vec::new();
    manifest.shards.clear();
    if !done.is_empty() {
        fs::create_dir_all(&shard_dir).map_err(|e| PipelineError::io(&shard_dir, e))?;
        for (n, chunk) in done.chunks(cfg.shard_size).enumerate() {
            let name = format!("shard-{n:05}.jsonl");
            let path = shard_dir.join(&name);
            write_shard(chunk, &path)?;
            manifest.shards.push(format!("{SHARD_DIR}/{name}"));
            shard_paths.push(path);
        }
    }
    manifest.validate()?;
    manifest.save(&manifest_path)?;
    let stats_path = out_dir.join(STATS_FILE);
    fs::write(&stats_path, render_stats(&stats(&manifest))).map_err(|e| PipelineError::io(&stats_path, e))?;
    Ok(RunOutcome {
        manifest,
        halted: false,
        filter,
        shard_paths,
    })
}
