//! Acceptance criteria 1 to 9. Each test writes one PASS/FAIL line straight
//! to stderr so the summary shows up even when output is captured.
//! Golden files live in tests/golden; regenerate with UPDATE_GOLDEN=1.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use reasonforge::backends::mock::{MockChat, ScriptedChat};
use reasonforge::backends::{BackendSuite, Embedders};
use reasonforge::evalkit::{
    build_benchmark, embed_similarity, evaluate, l1_l2, read_benchmark, render_report, render_user_study,
    tabulate_user_study, write_benchmark, EvalOptions, GroundTruthPredictor, InstructionKind, DEFAULT_TEMPLATES,
    STUDY_METHODS,
};
use reasonforge::fixtures::{fixture_caption_table, write_benchmark_corpus, write_fixture_corpus};
use reasonforge::imaging::{apply_filter, divergence, FilterMode, Picture, PixelGrid};
use reasonforge::pipeline::{
    orchestrate, render_stats, stats, Corpus, EntryStatus, GenerationConfig, ManifestEntry, PipelineManifest,
    RunOptions,
};
use reasonforge::prompts::{
    generate_candidates, parse_replace_reply, request_replacement, select_best, GenPromptInput, PromptError,
    PromptSet, ReplaceOutcome,
};
use reasonforge::records::{read_shard, Part};

/// Prints the verdict for one criterion when dropped.
struct Criterion {
    number: u8,
    title: &'static str,
    started: Instant,
}

impl Criterion {
    fn start(number: u8, title: &'static str) -> Self {
        Criterion {
            number,
            title,
            started: Instant::now(),
        }
    }

    fn elapsed(&self) -> Duration {
        self.started.elapsed()
    }
}

impl Drop for Criterion {
    fn drop(&mut self) {
        let verdict = if std::thread::panicking() { "FAIL" } else { "PASS" };
        let _ = writeln!(
            std::io::stderr(),
            "acceptance criterion {}: {} ... {verdict} ({:.2}s)",
            self.number,
            self.title,
            self.started.elapsed().as_secs_f64()
        );
    }
}

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

fn random_grid(rng: &mut ChaCha8Rng, w: u32, h: u32) -> PixelGrid {
    let values = (0..w * h * 3).map(|_| rng.gen_range(0.0..=1.0)).collect();
    PixelGrid::new(w, h, values).unwrap()
}

#[test]
fn criterion_1_divergence_oracle() {
    let c = Criterion::start(1, "divergence matches a per-pixel loop on 1,000 random 16x16 pairs");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let a = random_grid(&mut rng, 16, 16);
        let b = random_grid(&mut rng, 16, 16);
        let mut sum = 0.0;
        for y in 0..16 {
            for x in 0..16 {
                for ch in 0..3 {
                    let d = a.at(x, y, ch) - b.at(x, y, ch);
                    sum += d * d;
                }
            }
        }
        let oracle = sum / (16.0 * 16.0 * 3.0);
        let d = divergence(&a, &b).unwrap();
        assert!((d - oracle).abs() <= 1e-9, "{d} vs {oracle}");
        assert_eq!(d, divergence(&b, &a).unwrap());
        assert_eq!(divergence(&a, &a).unwrap(), 0.0);
    }
    assert!(c.elapsed() < Duration::from_secs(5));
}

fn random_pairs(rng: &mut ChaCha8Rng, n: usize, levels: u32) -> Vec<(String, f64)> {
    let mut pairs: Vec<(String, f64)> = (0..n)
        .map(|i| (format!("s{i:03}"), rng.gen_range(0..levels) as f64 / levels as f64))
        .collect();
    pairs.shuffle(rng);
    pairs
}

#[test]
fn criterion_2_filter_laws() {
    let c = Criterion::start(2, "absolute filter is monotone; rank fraction equals absolute at the quantile");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let n = rng.gen_range(0..60);
        let pairs = random_pairs(&mut rng, n, 20);
        let (a, b) = (rng.gen_range(0.0..1.2), rng.gen_range(0.0..1.2));
        let (t1, t2) = if a <= b { (a, b) } else { (b, a) };
        let kept1 = apply_filter(&pairs, FilterMode::Absolute { tau: t1 }).kept;
        let kept2 = apply_filter(&pairs, FilterMode::Absolute { tau: t2 }).kept;
        assert!(kept2.is_subset(&kept1));
    }
    for trial in 0..50 {
        let n = rng.gen_range(1..80);
        // Distinct values for half the trials, heavy ties for the rest.
        let levels = if trial % 2 == 0 { 1_000_000 } else { 4 };
        let pairs = random_pairs(&mut rng, n, levels);
        let mut order = pairs.clone();
        order.sort_by(|x, y| x.1.total_cmp(&y.1).then_with(|| x.0.cmp(&y.0)));
        for p in [0.0, 0.1, 0.25, 0.5, 1.0] {
            let k = (p * n as f64).floor() as usize;
            let rank = apply_filter(&pairs, FilterMode::RankFraction { fraction: p });
            let expected: BTreeSet<String> = order[..k].iter().map(|(id, _)| id.clone()).collect();
            assert_eq!(rank.abandoned, expected);
            let tau = if k < n { order[k].1 } else { f64::INFINITY };
            let quantile_free_of_ties = k == 0 || k == n || order[k - 1].1 < order[k].1;
            if quantile_free_of_ties {
                let absolute = apply_filter(&pairs, FilterMode::Absolute { tau });
                assert_eq!(rank, absolute, "p = {p}, n = {n}");
            }
        }
    }
    assert!(c.elapsed() < Duration::from_secs(5));
}

fn full_run(corpus: &Corpus, out: &Path, parallelism: usize, halt_after: Option<usize>) -> bool {
    let suite = BackendSuite::mock(fixture_caption_table());
    let mut opts = RunOptions::new(out);
    opts.parallelism = parallelism;
    opts.halt_after = halt_after;
    let cfg = GenerationConfig {
        seed: 7,
        ..GenerationConfig::default()
    };
    orchestrate(corpus, &Part::ALL.into(), &suite, &PromptSet::default(), &cfg, &opts)
        .unwrap()
        .halted
}

fn snapshot(out: &Path) -> (Vec<(String, Vec<u8>)>, String) {
    let mut shards = Vec::new();
    for entry in fs::read_dir(out.join("shards")).unwrap() {
        let path = entry.unwrap().path();
        shards.push((path.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&path).unwrap()));
    }
    shards.sort();
    let manifest = PipelineManifest::load(&out.join("manifest.json")).unwrap();
    (shards, manifest.comparable_json())
}

#[test]
fn criterion_3_end_to_end_determinism() {
    let c = Criterion::start(3, "parallelism 1, parallelism 8 and halt-then-resume give identical outputs");
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_fixture_corpus(&dir.path().join("corpus")).unwrap();
    assert_eq!(corpus.sources.len(), 50);

    let serial = dir.path().join("p1");
    let parallel = dir.path().join("p8");
    let resumed = dir.path().join("resumed");
    assert!(!full_run(&corpus, &serial, 1, None));
    assert!(!full_run(&corpus, &parallel, 8, None));
    assert!(full_run(&corpus, &resumed, 8, Some(20)));
    let partial = PipelineManifest::load(&resumed.join("manifest.json")).unwrap();
    assert_eq!(partial.entries.len() - partial.pending(), 20);
    assert!(!full_run(&corpus, &resumed, 8, None));

    let reference = snapshot(&serial);
    assert!(!reference.0.is_empty());
    assert_eq!(reference, snapshot(&parallel));
    assert_eq!(reference, snapshot(&resumed));
    assert!(c.elapsed() < Duration::from_secs(60));
}

fn exterior_hash(picture: &Picture, bbox: &reasonforge::records::BoundingBox) -> String {
    let mut hasher = Sha256::new();
    for (x, y, px) in picture.rgb.enumerate_pixels() {
        if !bbox.contains(x, y) {
            hasher.update(x.to_le_bytes());
            hasher.update(y.to_le_bytes());
            hasher.update(px.0);
        }
    }
    hex::encode(hasher.finalize())
}

#[test]
fn criterion_4_replacement_locality() {
    let _c = Criterion::start(4, "mock inpainting leaves everything outside the padded box untouched");
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_fixture_corpus(&dir.path().join("corpus")).unwrap();
    let out = dir.path().join("out");
    let suite = BackendSuite::mock(fixture_caption_table());
    let mut opts = RunOptions::new(&out);
    opts.parallelism = 4;
    let outcome = orchestrate(
        &corpus,
        &[Part::PartII, Part::PartIII].into(),
        &suite,
        &PromptSet::default(),
        &GenerationConfig::default(),
        &opts,
    )
    .unwrap();
    let samples: Vec<_> = outcome.shard_paths.iter().flat_map(|p| read_shard(p).unwrap()).collect();
    assert!(samples.len() >= 20, "only {} samples", samples.len());
    for sample in &samples {
        let bbox = sample.provenance.replacement.as_ref().unwrap().selected_box;
        let input = Picture::load(&sample.input_image, &out).unwrap();
        let edited = Picture::load(&sample.edited_image, &out).unwrap();
        assert_eq!(exterior_hash(&input, &bbox), exterior_hash(&edited, &bbox), "{}", sample.id);
        assert_ne!(input.hash, edited.hash, "{} was not edited", sample.id);
    }
}

fn random_word(rng: &mut ChaCha8Rng) -> String {
    const SYLLABLES: [&str; 10] = ["ba", "ko", "ri", "tel", "mun", "sa", "vo", "lin", "dre", "qua"];
    (0..rng.gen_range(1..4)).map(|_| *SYLLABLES.choose(rng).unwrap()).collect()
}

#[test]
fn criterion_5_prompt_protocol_contracts() {
    let _c = Criterion::start(5, "selection stays in the candidate list; replace replies round-trip; fallbacks work");
    let prompts = PromptSet::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    for trial in 0..1000u64 {
        let count = rng.gen_range(1..=8);
        let candidates: Vec<String> = (0..count).map(|i| format!("Option {i}: {}", random_word(&mut rng))).collect();
        let replies: Vec<String> = (0..rng.gen_range(1..5))
            .map(|_| match rng.gen_range(0..5) {
                0 | 1 => rng.gen_range(1..=count).to_string(),
                2 => (count + rng.gen_range(1..5)).to_string(),
                3 => random_word(&mut rng),
                _ => String::new(),
            })
            .collect();
        let chat = ScriptedChat::new(replies.clone());
        let (selection, _) = select_best(&chat, &prompts, &candidates, None, trial, 3).unwrap();
        assert!(candidates.contains(&selection.text));
        assert_eq!(candidates[selection.index], selection.text);

        // The first in-range index among the first three replies wins.
        let expected = if count == 1 {
            Some(0)
        } else {
            (0..3)
                .map(|a| &replies[a.min(replies.len() - 1)])
                .find_map(|r| r.parse::<usize>().ok().filter(|k| (1..=count).contains(k)))
                .map(|k| k - 1)
        };
        assert_eq!(selection.index, expected.unwrap_or(0));
        assert_eq!(selection.fell_back, expected.is_none());
    }

    let mock = MockChat::default();
    for trial in 0..100u64 {
        let candidates: Vec<String> = (0..rng.gen_range(2..6)).map(|_| random_word(&mut rng)).collect();
        let (selection, _) = select_best(&mock, &prompts, &candidates, None, trial, 3).unwrap();
        assert_eq!(candidates[selection.index], selection.text);
    }

    for _ in 0..1000 {
        let mut candidates: Vec<String> = Vec::new();
        while candidates.len() < rng.gen_range(1..6) {
            let word = random_word(&mut rng);
            if !candidates.iter().any(|c| c.eq_ignore_ascii_case(&word)) {
                candidates.push(word);
            }
        }
        let selected = candidates.choose(&mut rng).unwrap().clone();
        let target = loop {
            let word = format!("{} {}", random_word(&mut rng), random_word(&mut rng));
            if !word.eq_ignore_ascii_case(&selected) {
                break word;
            }
        };
        let outcome = ReplaceOutcome {
            selected_category: selected,
            target_category: target,
            reasoning_instruction: format!("Put \"{}\" there, it's {}! \u{00e9}", random_word(&mut rng), rng.gen::<u16>()),
        };
        assert_eq!(parse_replace_reply(&outcome.to_reply(), &candidates).unwrap(), outcome);
    }

    // Fallback: no usable selection reply.
    let candidates = vec!["first".to_string(), "second".to_string()];
    let (selection, trace) = select_best(&ScriptedChat::new(["the best one", "9"]), &prompts, &candidates, None, 0, 3).unwrap();
    assert!(selection.fell_back && selection.index == 0);
    assert!(trace.warnings.iter().any(|w| w.contains("fell back")));

    // Replacement: fenced reply accepted, invalid replies retried, exhaustion reported.
    let cats = vec!["butterfly".to_string(), "flower".to_string()];
    let good = r#"{"selected": "butterfly", "target": "bee", "instruction": "Put a honey maker there."}"#;
    let fenced = format!("```json\n{good}\n```");
    let (outcome, _) = request_replacement(&ScriptedChat::new([fenced.as_str()]), &prompts, "a butterfly", &cats, 0, 3).unwrap();
    assert_eq!(outcome.target_category, "bee");
    let flaky = ScriptedChat::new([
        "not json",
        r#"{"selected": "cat", "target": "dog", "instruction": "x"}"#,
        good,
    ]);
    let (outcome, trace) = request_replacement(&flaky, &prompts, "a butterfly", &cats, 0, 3).unwrap();
    assert_eq!(outcome.selected_category, "butterfly");
    assert_eq!(trace.warnings.len(), 2);
    let broken = ScriptedChat::new([r#"{"selected": "butterfly", "target": "butterfly", "instruction": "x"}"#]);
    assert!(matches!(
        request_replacement(&broken, &prompts, "a butterfly", &cats, 0, 3),
        Err(PromptError::Exhausted { attempts: 3, .. })
    ));

    // Generation: blank completions retried, then exhaustion.
    let inp = GenPromptInput {
        input_caption: "photo of fruits".into(),
        edited_caption: "photo of a cake".into(),
        original_instruction: "turn fruits to a cake".into(),
    };
    let (cands, _) = generate_candidates(&ScriptedChat::new(["", "Make it a dessert."]), &prompts, &inp, 2, 0, 3).unwrap();
    assert_eq!(cands, ["Make it a dessert.", "Make it a dessert."]);
    assert!(matches!(
        generate_candidates(&ScriptedChat::new(["   "]), &prompts, &inp, 1, 0, 3),
        Err(PromptError::Exhausted { .. })
    ));
}

#[test]
fn criterion_6_metric_identities() {
    let _c = Criterion::start(6, "ground truth scores L1 = L2 = 0 and CLIP-I = DINO = 1; fixed cases exact");
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_benchmark_corpus(&dir.path().join("corpus"), 12).unwrap();
    let suite = BackendSuite::mock(Default::default());
    let templates: Vec<String> = DEFAULT_TEMPLATES.iter().map(|t| t.to_string()).collect();
    let out = dir.path().join("bench");
    let build = build_benchmark(&corpus, &suite, &PromptSet::default(), &GenerationConfig::default(), &templates, 12, &out, 4)
        .unwrap();
    assert!(!build.entries.is_empty());
    for kind in InstructionKind::ALL {
        let report = evaluate(
            &build.entries,
            &out,
            &GroundTruthPredictor,
            &Embedders::mock(),
            kind,
            EvalOptions::default(),
        )
        .unwrap();
        assert!(report.missing.is_empty());
        let agg = report.aggregate.unwrap();
        assert_eq!(agg.count, build.entries.len());
        assert_eq!(agg.l1, 0.0);
        assert_eq!(agg.l2, 0.0);
        assert!((agg.clip_i - 1.0).abs() <= 1e-12, "{}", agg.clip_i);
        assert!((agg.dino - 1.0).abs() <= 1e-12, "{}", agg.dino);
        assert!((-1.0..=1.0).contains(&agg.clip_t));
    }

    let low = PixelGrid::constant(256, 256, 0.25).unwrap();
    let high = PixelGrid::constant(256, 256, 0.75).unwrap();
    assert_eq!(l1_l2(&low, &high).unwrap(), (0.5, 0.25));

    let oracle = 32.0 / (14.0f64 * 77.0).sqrt();
    let cosine = embed_similarity(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
    assert!((cosine - oracle).abs() <= 1e-7);
    assert!((cosine - 0.974_631_8).abs() <= 1e-7);
}

#[test]
fn criterion_7_benchmark_construction() {
    let _c = Criterion::start(7, "100-image benchmark direct instructions follow the templates");
    assert!(DEFAULT_TEMPLATES.contains(&"Turn {selected} to {target}"));
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_benchmark_corpus(&dir.path().join("corpus"), 100).unwrap();
    let suite = BackendSuite::mock(Default::default());
    let templates: Vec<String> = DEFAULT_TEMPLATES.iter().map(|t| t.to_string()).collect();
    let out = dir.path().join("bench");
    let build = build_benchmark(&corpus, &suite, &PromptSet::default(), &GenerationConfig::default(), &templates, 100, &out, 8)
        .unwrap();
    assert!(build.failures.is_empty(), "{:?}", build.failures);
    assert_eq!(build.entries.len(), 100);
    for entry in &build.entries {
        let index: usize = entry.id.trim_start_matches("test-").parse().unwrap();
        let expected = templates[index % templates.len()]
            .replace("{selected}", &entry.selected_category)
            .replace("{target}", &entry.target_category);
        assert_eq!(entry.direct_instruction, expected);
        assert!(entry.direct_instruction.contains(&entry.selected_category));
        assert!(entry.direct_instruction.contains(&entry.target_category));
        assert!(!entry.reasoning_instruction.trim().is_empty());
    }
    let path = out.join("benchmark.jsonl");
    write_benchmark(&build.entries, &path).unwrap();
    assert_eq!(read_benchmark(&path).unwrap(), build.entries);
}

/// Published quantitative table, direct then reasoning, in column order
/// L1, L2, CLIP-I, DINO, CLIP-T.
const PUBLISHED_TABLE: [(&str, [f64; 10]); 6] = [
    ("Null-text", [0.0931, 0.0354, 0.8542, 0.8036, 0.2479, 0.2637, 0.1165, 0.6326, 0.5249, 0.1706]),
    ("InstructPix2Pix", [0.1265, 0.0423, 0.8042, 0.7256, 0.2465, 0.2984, 0.1385, 0.6034, 0.5142, 0.1629]),
    ("MagicBrush", [0.0706, 0.0247, 0.9127, 0.8745, 0.2568, 0.2239, 0.0938, 0.6755, 0.6125, 0.1941]),
    ("EDICT", [0.1149, 0.0385, 0.8137, 0.7485, 0.2490, 0.2753, 0.1296, 0.6282, 0.5526, 0.1703]),
    ("InstructDiffusion", [0.0824, 0.0295, 0.8873, 0.8461, 0.2506, 0.2145, 0.0863, 0.6904, 0.6375, 0.2046]),
    ("Reasoning-tuned", [0.0646, 0.0203, 0.9246, 0.8920, 0.2553, 0.1347, 0.0476, 0.7824, 0.7216, 0.2350]),
];

#[test]
fn criterion_8_reference_tables() {
    let _c = Criterion::start(8, "report and user-study tables print the published reference rows");
    let report = render_report(&[]);
    check_golden("report_reference.txt", &report);
    for (method, values) in PUBLISHED_TABLE {
        let line = report
            .lines()
            .find(|l| l.starts_with(method) && l[method.len()..].starts_with(' '))
            .unwrap_or_else(|| panic!("no row for {method}"));
        let numbers: Vec<String> = line
            .split(|c: char| c == '|' || c.is_whitespace())
            .filter(|t| t.starts_with("0."))
            .map(String::from)
            .collect();
        let expected: Vec<String> = values.iter().map(|v| format!("{v:.4}")).collect();
        assert_eq!(numbers, expected, "{method}");
    }

    let methods: Vec<String> = STUDY_METHODS.iter().map(|m| m.to_string()).collect();
    let study = render_user_study(&tabulate_user_study(&[], &methods).unwrap(), "local");
    check_golden("user_study_reference.txt", &study);
    let rows: Vec<Vec<u64>> = study
        .lines()
        .filter(|l| l.starts_with("published"))
        .map(|l| l.split_whitespace().filter_map(|t| t.parse().ok()).collect())
        .collect();
    assert_eq!(rows, vec![vec![16, 21, 28, 35, 100], vec![13, 15, 18, 54, 100]]);
}

#[test]
fn criterion_9_stats_reference_row() {
    let _c = Criterion::start(9, "stats prints the published part sizes 8,013 / 4,141 / 28,058");
    let mut manifest = PipelineManifest::new("hash");
    for (i, part) in [Part::PartI, Part::PartI, Part::PartII, Part::PartIII].into_iter().enumerate() {
        let id = format!("s{i}-{}", part.suffix());
        manifest.register(&id, part, &format!("s{i}"));
        let status = if i == 3 { EntryStatus::Failed } else { EntryStatus::Done };
        manifest
            .transition(
                &id,
                ManifestEntry {
                    status,
                    reason: (i == 3).then(|| "no detections: \"statue\"".to_string()),
                    ..ManifestEntry::pending(part, format!("s{i}"))
                },
            )
            .unwrap();
    }
    let text = render_stats(&stats(&manifest));
    check_golden("stats_reference.txt", &text);
    for (label, published) in [("PartI", "8,013"), ("PartII", "4,141"), ("PartIII", "28,058")] {
        let line = text.lines().find(|l| l.split_whitespace().next() == Some(label)).unwrap();
        assert_eq!(line.split_whitespace().last(), Some(published), "{line}");
    }
}
