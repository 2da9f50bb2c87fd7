//! The Part I and Part II/III stage machines for a single source.
//!
//! Stages never touch the output directory. They return the finished
//! sample plus the image files the orchestrator must materialize.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::source::SourcePair;
use super::GenerationConfig;
use crate::backends::{BackendError, BackendSuite, Served};
use crate::hashing::hash_u64;
use crate::imaging::{Picture, DIVERGENCE_CONVENTION};
use crate::prompts::{
    generate_candidates, request_replacement, select_best, GenPromptInput, PromptError, PromptSet,
    ReplaceOutcome, Trace,
};
use crate::records::{
    BoundingBox, EditSample, ImageRef, Part, ProvenanceRecord, ReplacementRecord, SourceDataset,
};

/// Everything a stage reads.
#[derive(Clone, Copy)]
pub struct StageContext<'a> {
    pub suite: &'a BackendSuite,
    pub prompts: &'a PromptSet,
    pub cfg: &'a GenerationConfig,
    pub dataset: SourceDataset,
    /// Directory the source image paths are relative to.
    pub corpus_root: &'a Path,
}

/// An image file the orchestrator writes under the output directory.
#[derive(Debug, Clone, PartialEq)]
pub enum Artifact {
    /// Byte-for-byte copy of a source file.
    Copy { from: PathBuf, to: String },
    /// A generated image, written as PNG.
    Png { picture: Picture, to: String },
}

impl Artifact {
    pub fn destination(&self) -> &str {
        match self {
            Artifact::Copy { to, .. } | Artifact::Png { to, .. } => to,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StageOutput {
    pub sample: EditSample,
    pub artifacts: Vec<Artifact>,
    pub trace: Trace,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageFailure {
    /// `kind` or `kind: detail`.
    pub reason: String,
    pub trace: Trace,
}

type StageResult = Result<StageOutput, StageFailure>;

/// Sample id for a source and part: `{source_id}-p1` and so on.
pub fn sample_id(source_id: &str, part: Part) -> String {
    format!("{source_id}-{}", part.suffix())
}

/// Per-sample seed derived from the run seed and the sample id.
pub fn sample_seed(run_seed: u64, sample_id: &str) -> u64 {
    hash_u64(&[b"sample", &run_seed.to_le_bytes(), sample_id.as_bytes()])
}

fn extension(path: &str) -> String {
    Path::new(path)
        .extension()
        .map(|e| e.to_string_lossy().to_lowercase())
        .filter(|e| !e.is_empty())
        .unwrap_or_else(|| "png".to_string())
}

fn output_path(sample_id: &str, name: &str) -> String {
    format!("images/{sample_id}/{name}")
}

struct Failing {
    trace: Trace,
}

impl Failing {
    fn fail(&self, reason: impl Into<String>) -> StageFailure {
        StageFailure {
            reason: reason.into(),
            trace: self.trace.clone(),
        }
    }

    fn served<T>(&mut self, served: Served<T>) -> T {
        self.trace.cache_keys.push(served.cache_key);
        self.trace.warnings.extend(served.warnings);
        served.value
    }

    fn prompt<T>(&mut self, result: Result<(T, Trace), PromptError>, kind: &str) -> Result<T, StageFailure> {
        match result {
            Ok((value, trace)) => {
                self.trace.absorb(trace);
                Ok(value)
            }
            Err(e) => Err(self.fail(format!("{kind}: {e}"))),
        }
    }
}

/// Loads a source image and checks it against the recorded hash.
fn load_verified(reference: &ImageRef, root: &Path) -> Result<Picture, String> {
    let picture = Picture::load(reference, root).map_err(|e| format!("source image: {e}"))?;
    if picture.hash != reference.content_hash || picture.dims() != (reference.width, reference.height) {
        return Err(format!(
            "source image: {} does not match its recorded hash or size",
            reference.path
        ));
    }
    Ok(picture)
}

fn versions(suite: &BackendSuite, roles: &[&str]) -> BTreeMap<String, String> {
    roles
        .iter()
        .map(|role| (role.to_string(), suite.version_of(role)))
        .collect()
}

/// Part I: rewrite the original instruction into a reasoning instruction by
/// generating candidates and letting the model pick one. Both images are
/// carried over unmodified.
pub fn run_part1(source: &SourcePair, ctx: StageContext<'_>) -> StageResult {
    let id = sample_id(&source.source_id, Part::PartI);
    let seed = sample_seed(ctx.cfg.seed, &id);
    let mut run = Failing {
        trace: Trace::default(),
    };
    let edited_ref = source
        .edited_image
        .as_ref()
        .ok_or_else(|| run.fail("missing fields: edited_image"))?;
    let field = |value: &Option<String>, name: &str| {
        value
            .clone()
            .filter(|v| !v.trim().is_empty())
            .ok_or_else(|| format!("missing fields: {name}"))
    };
    let inp = (|| {
        Ok::<_, String>(GenPromptInput {
            input_caption: field(&source.input_caption, "input_caption")?,
            edited_caption: field(&source.edited_caption, "edited_caption")?,
            original_instruction: field(&source.original_instruction, "original_instruction")?,
        })
    })()
    .map_err(|e| run.fail(e))?;
    load_verified(&source.input_image, ctx.corpus_root).map_err(|e| run.fail(e))?;
    load_verified(edited_ref, ctx.corpus_root).map_err(|e| run.fail(e))?;

    let candidates = run.prompt(
        generate_candidates(ctx.suite, ctx.prompts, &inp, ctx.cfg.n_candidates, seed, ctx.cfg.retry_budget),
        "generation",
    )?;
    let selection = run.prompt(
        select_best(ctx.suite, ctx.prompts, &candidates, Some(&inp), seed, ctx.cfg.retry_budget),
        "selection",
    )?;

    let input_to = output_path(&id, &format!("input.{}", extension(&source.input_image.path)));
    let edited_to = output_path(&id, &format!("edited.{}", extension(&edited_ref.path)));
    let hashes = ctx.prompts.hashes();
    let settings = BTreeMap::from([
        ("n_candidates".to_string(), ctx.cfg.n_candidates.to_string()),
        ("selected_index".to_string(), (selection.index + 1).to_string()),
        ("selection_fallback".to_string(), selection.fell_back.to_string()),
        ("prompt_generate".to_string(), hashes["generate"].clone()),
        ("prompt_select".to_string(), hashes["select"].clone()),
        ("divergence".to_string(), DIVERGENCE_CONVENTION.to_string()),
        ("canonical_size".to_string(), ctx.cfg.filter.canonical_size.to_string()),
    ]);
    let sample = EditSample {
        id: id.clone(),
        input_image: ImageRef {
            path: input_to.clone(),
            ..source.input_image.clone()
        },
        edited_image: ImageRef {
            path: edited_to.clone(),
            ..edited_ref.clone()
        },
        input_caption: Some(inp.input_caption),
        edited_caption: Some(inp.edited_caption),
        direct_instruction: Some(inp.original_instruction),
        reasoning_instruction: selection.text,
        part: Part::PartI,
        provenance: ProvenanceRecord {
            source_dataset: ctx.dataset,
            source_id: source.source_id.clone(),
            generator_versions: versions(ctx.suite, &["llm"]),
            seed,
            settings,
            replacement: None,
        },
    };
    Ok(StageOutput {
        sample,
        artifacts: vec![
            Artifact::Copy {
                from: source.input_image.resolve(ctx.corpus_root),
                to: input_to,
            },
            Artifact::Copy {
                from: edited_ref.resolve(ctx.corpus_root),
                to: edited_to,
            },
        ],
        trace: run.trace,
    })
}

fn backend_failure(kind: &str, e: BackendError) -> String {
    match e {
        BackendError::DegenerateBox { area, min } => format!("degenerate box: area {area} < {min}"),
        other => format!("{kind}: {other}"),
    }
}

/// Part II (captioned source) or Part III (image only): caption, extract
/// candidate categories, plan a replacement, ground the selected category
/// and inpaint the target into its padded box.
pub fn run_part23(source: &SourcePair, part: Part, ctx: StageContext<'_>) -> StageResult {
    assert!(part != Part::PartI, "run_part23 handles PartII and PartIII");
    let id = sample_id(&source.source_id, part);
    let seed = sample_seed(ctx.cfg.seed, &id);
    let mut run = Failing {
        trace: Trace::default(),
    };
    let picture = load_verified(&source.input_image, ctx.corpus_root).map_err(|e| run.fail(e))?;
    let mut roles = vec!["llm", "extractor", "detector", "inpainter"];
    let mut settings = BTreeMap::new();

    let caption = match source.input_caption.as_deref().map(str::trim).filter(|c| !c.is_empty()) {
        Some(c) => {
            settings.insert("caption_source".to_string(), "source".to_string());
            c.to_string()
        }
        None => {
            roles.push("captioner");
            settings.insert("caption_source".to_string(), "captioner".to_string());
            let served = ctx
                .suite
                .caption(&picture)
                .map_err(|e| run.fail(backend_failure("caption", e)))?;
            run.served(served).text
        }
    };

    let served = ctx
        .suite
        .extract_entities(&caption)
        .map_err(|e| run.fail(backend_failure("extraction", e)))?;
    let candidates = run.served(served);
    if candidates.is_empty() {
        return Err(run.fail("no candidates"));
    }

    let mut offered = candidates.clone();
    let (outcome, detection) = loop {
        let outcome: ReplaceOutcome = run.prompt(
            request_replacement(ctx.suite, ctx.prompts, &caption, &offered, seed, ctx.cfg.retry_budget),
            "replacement",
        )?;
        let served = ctx
            .suite
            .ground(&picture, &outcome.selected_category)
            .map_err(|e| run.fail(backend_failure("grounding", e)))?;
        let detections = run.served(served);
        if let Some(best) = detections.into_iter().next() {
            break (outcome, best);
        }
        let excluded = outcome.selected_category;
        offered.retain(|c| c != &excluded);
        if settings.contains_key("excluded") || offered.is_empty() {
            return Err(run.fail(format!("no detections: {excluded:?}")));
        }
        run.trace
            .warnings
            .push(format!("no detections for {excluded:?}; retrying replacement without it"));
        settings.insert("excluded".to_string(), excluded);
    };

    let (width, height) = picture.dims();
    let padded: BoundingBox = detection.bbox.padded(ctx.cfg.box_padding, width, height);
    if padded.area() < ctx.cfg.min_box_area {
        return Err(run.fail(format!("degenerate box: area {} < {}", padded.area(), ctx.cfg.min_box_area)));
    }
    let served = ctx
        .suite
        .inpaint_replace(&picture, &outcome.selected_category, &padded, &outcome.target_category)
        .map_err(|e| run.fail(backend_failure("inpaint", e)))?;
    let edited = run.served(served);

    let d = detection.bbox;
    settings.insert("box_padding".to_string(), ctx.cfg.box_padding.to_string());
    settings.insert(
        "detected_box".to_string(),
        format!("[{}, {}, {}, {}]", d.x_min, d.y_min, d.x_max, d.y_max),
    );
    settings.insert("detection_score".to_string(), format!("{:.4}", detection.score));
    settings.insert("prompt_replace".to_string(), ctx.prompts.hashes()["replace"].clone());

    let input_to = output_path(&id, &format!("input.{}", extension(&source.input_image.path)));
    let edited_to = output_path(&id, "edited.png");
    let sample = EditSample {
        id: id.clone(),
        input_image: ImageRef {
            path: input_to.clone(),
            ..source.input_image.clone()
        },
        edited_image: edited.reference(edited_to.clone()),
        input_caption: Some(caption),
        edited_caption: None,
        direct_instruction: None,
        reasoning_instruction: outcome.reasoning_instruction.clone(),
        part,
        provenance: ProvenanceRecord {
            source_dataset: ctx.dataset,
            source_id: source.source_id.clone(),
            generator_versions: versions(ctx.suite, &roles),
            seed,
            settings,
            replacement: Some(ReplacementRecord {
                selected_category: outcome.selected_category,
                target_category: outcome.target_category,
                selected_box: padded,
                candidate_categories: candidates,
            }),
        },
    };
    if let Err(e) = sample.validate() {
        return Err(run.fail(format!("invalid sample: {e}")));
    }
    Ok(StageOutput {
        sample,
        artifacts: vec![
            Artifact::Copy {
                from: source.input_image.resolve(ctx.corpus_root),
                to: input_to,
            },
            Artifact::Png {
                picture: edited,
                to: edited_to,
            },
        ],
        trace: run.trace,
    })
}
