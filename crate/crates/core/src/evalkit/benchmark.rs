//! Benchmark construction from the replacement chain.
//!
//! Each test image goes through the Part II/III stages; the inpainted result
//! is the ground truth, the generated reasoning instruction is kept, and a
//! direct instruction is written from a template naming the two categories.
//!
//! A benchmark file is JSON lines of [`BenchmarkEntry`]; image paths are
//! relative to the file's directory.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::backends::BackendSuite;
use crate::pipeline::orchestrator::{materialize, parallel_map};
use crate::pipeline::{run_part23, Corpus, GenerationConfig, StageContext};
use crate::prompts::PromptSet;
use crate::records::{ImageRef, Part};

pub const DEFAULT_TEMPLATES: [&str; 4] = [
    "Turn {selected} to {target}",
    "Replace the {selected} with the {target}",
    "Change the {selected} into the {target}",
    "Swap the {selected} for the {target}",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkEntry {
    pub id: String,
    pub input_image: ImageRef,
    pub gt_edited_image: ImageRef,
    pub input_caption: String,
    pub target_caption: String,
    pub direct_instruction: String,
    pub reasoning_instruction: String,
    pub selected_category: String,
    pub target_category: String,
}

impl BenchmarkEntry {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |message: String| EvalError::InvalidEntry {
            id: self.id.clone(),
            message,
        };
        if self.direct_instruction.trim().is_empty() || self.reasoning_instruction.trim().is_empty() {
            return Err(bad("instructions must be non-empty".into()));
        }
        for category in [&self.selected_category, &self.target_category] {
            if !self.direct_instruction.contains(category.as_str()) {
                return Err(bad(format!("direct instruction does not mention {category:?}")));
            }
        }
        self.input_image.validate().map_err(bad)?;
        self.gt_edited_image.validate().map_err(bad)?;
        Ok(())
    }
}

/// Fills `{selected}` and `{target}`. Both placeholders must appear and no
/// other braces may.
pub fn instantiate_template(template: &str, selected: &str, target: &str) -> Result<String, EvalError> {
    let bad = |message: &str| EvalError::Template {
        template: template.to_string(),
        message: message.to_string(),
    };
    if !template.contains("{selected}") || !template.contains("{target}") {
        return Err(bad("needs both {selected} and {target}"));
    }
    let stripped = template.replace("{selected}", "").replace("{target}", "");
    if stripped.contains(['{', '}']) {
        return Err(bad("only {selected} and {target} placeholders are allowed"));
    }
    Ok(template.replace("{selected}", selected).replace("{target}", target))
}

/// The caption with the first whole-word occurrence of `selected` swapped
/// for `target`, or with a trailing note when the word does not occur.
pub fn target_caption(caption: &str, selected: &str, target: &str) -> String {
    let lower = caption.to_lowercase();
    let needle = selected.to_lowercase();
    let is_word = |c: Option<char>| c.is_some_and(|c| c.is_alphanumeric());
    let mut from = 0;
    while let Some(pos) = lower[from..].find(&needle).map(|p| p + from) {
        let end = pos + needle.len();
        if !is_word(lower[..pos].chars().next_back()) && !is_word(lower[end..].chars().next()) {
            return format!("{}{}{}", &caption[..pos], target, &caption[end..]);
        }
        from = pos + needle.len().max(1);
    }
    format!("{caption}, with a {target} instead of the {selected}")
}

#[derive(Debug, Clone, Default)]
pub struct BenchmarkBuild {
    pub entries: Vec<BenchmarkEntry>,
    /// Source id and reason for every skipped image.
    pub failures: Vec<(String, String)>,
}

/// Runs the replacement chain over the first `n_images` sources of `corpus`
/// and writes the images under `out_dir`. Template `i mod len` is used for
/// the `i`-th source.
#[allow(clippy::too_many_arguments)]
pub fn build_benchmark(
    corpus: &Corpus,
    suite: &BackendSuite,
    prompts: &PromptSet,
    cfg: &GenerationConfig,
    templates: &[String],
    n_images: usize,
    out_dir: &Path,
    parallelism: usize,
) -> Result<BenchmarkBuild, EvalError> {
    if templates.is_empty() {
        return Err(EvalError::Template {
            template: String::new(),
            message: "at least one template is required".into(),
        });
    }
    for template in templates {
        instantiate_template(template, "a", "b")?;
    }
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| EvalError::io(out_dir, e))?;
    let ctx = StageContext {
        suite,
        prompts,
        cfg,
        dataset: corpus.dataset,
        corpus_root: &corpus.root,
    };
    let indices: Vec<usize> = (0..n_images.min(corpus.sources.len())).collect();
    let results = parallel_map(&indices, parallelism, |&i| {
        let source = &corpus.sources[i];
        let part = if source.has_caption() { Part::PartII } else { Part::PartIII };
        let out = run_part23(source, part, ctx).map_err(|f| f.reason)?;
        materialize(out_dir, &out.artifacts)?;
        let sample = out.sample;
        let replacement = sample.provenance.replacement.expect("replacement samples carry a record");
        let caption = sample.input_caption.unwrap_or_default();
        let direct = instantiate_template(
            &templates[i % templates.len()],
            &replacement.selected_category,
            &replacement.target_category,
        )
        .map_err(|e| e.to_string())?;
        let entry = BenchmarkEntry {
            id: source.source_id.clone(),
            input_image: sample.input_image,
            gt_edited_image: sample.edited_image,
            target_caption: target_caption(&caption, &replacement.selected_category, &replacement.target_category),
            input_caption: caption,
            direct_instruction: direct,
            reasoning_instruction: sample.reasoning_instruction,
            selected_category: replacement.selected_category,
            target_category: replacement.target_category,
        };
        entry.validate().map_err(|e| e.to_string())?;
        Ok::<_, String>(entry)
    });
    let mut build = BenchmarkBuild::default();
    for (&i, result) in indices.iter().zip(results) {
        match result {
            Ok(entry) => build.entries.push(entry),
            Err(reason) => {
                log::warn!("benchmark: skipping {}: {reason}", corpus.sources[i].source_id);
                build.failures.push((corpus.sources[i].source_id.clone(), reason));
            }
        }
    }
    Ok(build)
}

pub fn write_benchmark(entries: &[BenchmarkEntry], path: &Path) -> Result<(), EvalError> {
    let mut out = String::new();
    for entry in entries {
        entry.validate()?;
        out.push_str(&serde_json::to_string(entry).expect("entry serializes"));
        out.push('\n');
    }
    let mut file = fs::File::create(path).map_err(|e| EvalError::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| EvalError::io(path, e))
}

pub fn read_benchmark(path: &Path) -> Result<Vec<BenchmarkEntry>, EvalError> {
    let text = fs::read_to_string(path).map_err(|e| EvalError::io(path, e))?;
    let mut entries = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| EvalError::Malformed {
            path: path.to_path_buf(),
            line: idx + 1,
            message,
        };
        let entry: BenchmarkEntry = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        entry.validate().map_err(|e| malformed(e.to_string()))?;
        entries.push(entry);
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn turn_template() {
        assert_eq!(
            instantiate_template("Turn {selected} to {target}", "butterfly", "bee").unwrap(),
            "Turn butterfly to bee"
        );
    }

    #[test]
    fn template_validation() {
        assert!(instantiate_template("Turn it to {target}", "a", "b").is_err());
        assert!(instantiate_template("Turn {selected} to {target} {x}", "a", "b").is_err());
        for t in DEFAULT_TEMPLATES {
            assert!(instantiate_template(t, "cat", "dog").unwrap().contains("cat"));
        }
    }

    #[test]
    fn target_caption_swaps_whole_words() {
        assert_eq!(target_caption("a butterfly on a flower", "butterfly", "bee"), "a bee on a flower");
        assert_eq!(target_caption("a catalog near a cat", "cat", "dog"), "a catalog near a dog");
        assert_eq!(target_caption("A Cat", "cat", "dog"), "A dog");
        assert_eq!(target_caption("a lamp", "cat", "dog"), "a lamp, with a dog instead of the cat");
    }
}
