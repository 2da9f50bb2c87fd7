//! `reasonforge` command-line driver.
//!
//! Exit status is 0 on success, 1 when some samples failed (or any other
//! runtime error), 2 for usage and configuration errors.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use reasonforge::config::{ConfigError, RunConfig};
use reasonforge::evalkit::{
    self, build_benchmark, evaluate, read_benchmark, read_votes, render_report, render_user_study, report_json,
    tabulate_user_study, write_benchmark, EditorPredictor, EvalError, EvalOptions, GroundTruthPredictor,
    InstructionKind, Predictor, DEFAULT_TEMPLATES, STUDY_METHODS,
};
use reasonforge::fixtures::{self, MOCK_CAPTIONS_FILE};
use reasonforge::pipeline::{
    self, convert, filter_corpus, orchestrate, render_stats, stats, Corpus, EntryStatus, PipelineError,
    PipelineManifest, RunOptions,
};
use reasonforge::prompts::PromptSet;
use reasonforge::records::Part;

const BENCHMARK_FILE: &str = "benchmark.jsonl";

#[derive(Parser)]
#[command(name = "reasonforge", version, about = "Reasoning-instruction dataset builder and editing benchmark")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Plain-text `key = value` configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Replace every backend with its offline mock.
    #[arg(long, global = true)]
    mock: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    /// Extra configuration, same keys as the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// -v for info, -vv for debug logging.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Turn a raw dataset tree into a source corpus.
    Convert {
        dataset: Dataset,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic fixture corpus.
    Fixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = fixtures::STANDARD_PAIRS)]
        pairs: usize,
        #[arg(long, default_value_t = fixtures::STANDARD_IMAGES)]
        images: usize,
        /// Write N captioned test images for build-benchmark instead.
        #[arg(long, value_name = "N")]
        benchmark: Option<usize>,
    },
    /// Compute input/edited divergences and the kept set.
    Filter {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate dataset samples.
    Gen {
        target: GenTarget,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stop after committing N samples, as if interrupted.
        #[arg(long, value_name = "N")]
        halt_after: Option<usize>,
    },
    /// Build a benchmark from captioned or captionable test images.
    BuildBenchmark {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n_images: usize,
        /// Direct-instruction template with {selected} and {target}; repeatable.
        #[arg(long = "template")]
        templates: Vec<String>,
    },
    /// Score an editor, or the ground truth, on a benchmark.
    Evaluate {
        #[arg(long)]
        benchmark: PathBuf,
        /// Directory for report.txt and report.json; defaults to the benchmark's.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Use the ground-truth edits as predictions.
        #[arg(long)]
        ground_truth: bool,
        #[arg(long, value_enum, default_value_t = KindArg::Both)]
        kind: KindArg,
    },
    /// Summarize a generation output directory.
    Stats {
        #[arg(long)]
        out: PathBuf,
    },
    /// Count best-image votes from a CSV of rater_id,sample_id,method.
    UserStudy {
        #[arg(long)]
        votes: PathBuf,
        /// Comma-separated method names; defaults to the four standard ones.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        #[arg(long, default_value = "local")]
        label: String,
        /// Write the table as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Dataset {
    Ip2p,
    V3det,
}

#[derive(Clone, Copy, ValueEnum)]
enum GenTarget {
    Part1,
    Part23,
    All,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum KindArg {
    Direct,
    Reasoning,
    Both,
}

/// Raised for problems the user has to fix before rerunning.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() || cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            if matches!(e, PipelineError::Config(_) | PipelineError::ConfigMismatch { .. }) {
                return 2;
            }
        }
        if let Some(EvalError::Template { .. }) = cause.downcast_ref::<EvalError>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {}", describe(&err));
            ExitCode::from(exit_code_for(&err))
        }
    }
}

/// The error chain on one line, skipping causes already quoted by their parent.
fn describe(err: &anyhow::Error) -> String {
    let mut text = err.to_string();
    for cause in err.chain().skip(1) {
        let cause = cause.to_string();
        if !text.contains(&cause) {
            text = format!("{text}: {cause}");
        }
    }
    text
}

fn resolve_config(global: &GlobalArgs, extra: &[(&str, String)]) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    for pair in &global.set {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| UsageError(format!("--set expects KEY=VALUE, got {pair:?}")))?;
        overrides.push((key.trim().to_string(), value.to_string()));
    }
    if global.mock {
        overrides.push(("mock".into(), "true".into()));
    }
    if let Some(seed) = global.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if let Some(n) = global.parallelism {
        overrides.push(("parallelism".into(), n.to_string()));
    }
    overrides.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
    Ok(RunConfig::resolve(global.config.as_deref(), &overrides)?)
}

fn load_prompts(cfg: &RunConfig) -> Result<PromptSet> {
    match &cfg.prompt_dir {
        Some(dir) => PromptSet::load_dir(dir).map_err(|e| UsageError(e.to_string()).into()),
        None => Ok(PromptSet::default()),
    }
}

/// Picks up the caption table a fixture corpus ships with.
fn adopt_mock_captions(cfg: &mut RunConfig, corpus: &Corpus) {
    let table = corpus.root.join(MOCK_CAPTIONS_FILE);
    if cfg.is_mock("captioner") && cfg.mock_captions.is_none() && table.is_file() {
        cfg.mock_captions = Some(table);
    }
}

fn run(cli: Cli) -> Result<u8> {
    let global = &cli.global;
    match cli.command {
        Command::Convert { dataset, input, out } => {
            let cfg = resolve_config(global, &[])?;
            let corpus = match dataset {
                Dataset::Ip2p => convert::convert_instructpix2pix(&input, &out, cfg.parallelism)?,
                Dataset::V3det => convert::convert_v3det(&input, &out, cfg.parallelism)?,
            };
            println!("wrote {} sources to {}", corpus.sources.len(), pipeline::source::corpus_path(&out).display());
            Ok(0)
        }
        Command::Fixtures {
            out,
            pairs,
            images,
            benchmark,
        } => {
            let corpus = match benchmark {
                Some(n) => fixtures::write_benchmark_corpus(&out, n)?,
                None => fixtures::write_corpus(&out, pairs, images)?,
            };
            println!("wrote {} fixture sources to {}", corpus.sources.len(), out.display());
            Ok(0)
        }
        Command::Filter { input, out } => {
            let cfg = resolve_config(global, &[])?;
            let corpus = Corpus::load(&input)?;
            let report = filter_corpus(&corpus, &cfg.generation.filter, cfg.parallelism);
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let path = out.join(pipeline::orchestrator::FILTER_FILE);
            fs::write(&path, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", path.display()))?;
            println!(
                "{} pairs: {} kept, {} abandoned, {} unreadable; report in {}",
                report.divergences.len() + report.errors.len(),
                report.kept.len(),
                report.abandoned.len(),
                report.errors.len(),
                path.display()
            );
            Ok(if report.errors.is_empty() { 0 } else { 1 })
        }
        Command::Gen {
            target,
            input,
            out,
            halt_after,
        } => {
            let mut cfg = resolve_config(global, &[("out_dir", out.display().to_string())])?;
            let corpus = Corpus::load(&input)?;
            adopt_mock_captions(&mut cfg, &corpus);
            let (parts, required): (BTreeSet<Part>, &[&str]) = match target {
                GenTarget::Part1 => ([Part::PartI].into(), &["llm"]),
                GenTarget::Part23 => ([Part::PartII, Part::PartIII].into(), &["llm", "detector", "inpainter"]),
                GenTarget::All => (Part::ALL.into(), &["llm", "detector", "inpainter"]),
            };
            let suite = cfg.build_suite(required)?;
            let prompts = load_prompts(&cfg)?;
            let opts = RunOptions {
                out_dir: out.clone(),
                parallelism: cfg.parallelism,
                halt_after,
                hash_extras: cfg.hash_extras()?,
                run_config: cfg.redacted_json(),
            };
            let outcome = orchestrate(&corpus, &parts, &suite, &prompts, &cfg.generation, &opts)?;
            print!("{}", render_stats(&stats(&outcome.manifest)));
            if outcome.halted {
                eprintln!("halted after {} samples; rerun the same command to resume", halt_after.unwrap_or(0));
                return Ok(1);
            }
            let failed = outcome.manifest.status_counts().get(&EntryStatus::Failed).copied().unwrap_or(0);
            if failed > 0 {
                eprintln!("{failed} samples failed; see {}", out.join(pipeline::orchestrator::MANIFEST_FILE).display());
                return Ok(1);
            }
            Ok(0)
        }
        Command::BuildBenchmark {
            input,
            out,
            n_images,
            templates,
        } => {
            let mut cfg = resolve_config(global, &[])?;
            let corpus = Corpus::load(&input)?;
            adopt_mock_captions(&mut cfg, &corpus);
            let suite = cfg.build_suite(&["llm", "detector", "inpainter"])?;
            let prompts = load_prompts(&cfg)?;
            let templates = if templates.is_empty() {
                DEFAULT_TEMPLATES.iter().map(|t| t.to_string()).collect()
            } else {
                templates
            };
            let build = build_benchmark(
                &corpus,
                &suite,
                &prompts,
                &cfg.generation,
                &templates,
                n_images,
                &out,
                cfg.parallelism,
            )?;
            let path = out.join(BENCHMARK_FILE);
            write_benchmark(&build.entries, &path)?;
            println!("wrote {} entries to {}", build.entries.len(), path.display());
            for (id, reason) in &build.failures {
                eprintln!("skipped {id}: {reason}");
            }
            Ok(if build.failures.is_empty() { 0 } else { 1 })
        }
        Command::Evaluate {
            benchmark,
            out,
            ground_truth,
            kind,
        } => {
            let cfg = resolve_config(global, &[])?;
            let entries = read_benchmark(&benchmark)?;
            let root = benchmark.parent().map(Path::to_path_buf).unwrap_or_default();
            let embedders = cfg.build_embedders()?;
            let suite;
            let editor;
            let predictor: &dyn Predictor = if ground_truth {
                &GroundTruthPredictor
            } else {
                suite = cfg.build_suite(&["editor"])?;
                editor = EditorPredictor { suite: &suite };
                &editor
            };
            let kinds: Vec<InstructionKind> = match kind {
                KindArg::Direct => vec![InstructionKind::Direct],
                KindArg::Reasoning => vec![InstructionKind::Reasoning],
                KindArg::Both => InstructionKind::ALL.to_vec(),
            };
            let opts = EvalOptions {
                canonical_size: cfg.generation.filter.canonical_size,
                parallelism: cfg.parallelism,
            };
            let mut reports = Vec::new();
            for kind in kinds {
                reports.push(evaluate(&entries, &root, predictor, &embedders, kind, opts)?);
            }
            let out = out.unwrap_or_else(|| root.clone());
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let text = render_report(&reports);
            fs::write(out.join("report.txt"), &text).context("writing report.txt")?;
            fs::write(out.join("report.json"), serde_json::to_string_pretty(&report_json(&reports))?)
                .context("writing report.json")?;
            print!("{text}");
            let missing: usize = reports.iter().map(|r| r.missing.len()).sum();
            Ok(if missing == 0 { 0 } else { 1 })
        }
        Command::Stats { out } => {
            let path = out.join(pipeline::orchestrator::MANIFEST_FILE);
            if !path.is_file() {
                bail!(UsageError(format!("{} does not exist; run `gen` first", path.display())));
            }
            let manifest = PipelineManifest::load(&path)?;
            print!("{}", render_stats(&stats(&manifest)));
            Ok(0)
        }
        Command::UserStudy {
            votes,
            methods,
            label,
            json,
        } => {
            let methods = if methods.is_empty() {
                STUDY_METHODS.iter().map(|m| m.to_string()).collect()
            } else {
                methods
            };
            let votes = read_votes(&votes)?;
            let table = tabulate_user_study(&votes, &methods)?;
            print!("{}", render_user_study(&table, &label));
            if let Some(path) = json {
                let value = serde_json::json!({
                    "local": table,
                    "published": evalkit::PUBLISHED_USER_STUDY.iter().map(|(kind, row)| serde_json::json!({"kind": kind, "counts": row})).collect::<Vec<_>>(),
                });
                fs::write(&path, serde_json::to_string_pretty(&value)?).with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(0)
        }
    }
}
