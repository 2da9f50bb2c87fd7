//! Converters from pre-fetched public corpora to the source manifest format.
//!
//! InstructPix2Pix: one directory per prompt, each holding `prompt.json`
//! (`{"input": caption, "edit": instruction, "output": edited caption}`) and
//! image pairs `<seed>_0.jpg` (input) / `<seed>_1.jpg` (edited). Every pair
//! becomes a source with id `<dir>_<seed>`.
//!
//! V3Det: any tree of images. Every image becomes an image-only source whose
//! id is its relative path without extension, `/` replaced by `_`.
//!
//! Images are referenced in place; paths in the written corpus are relative
//! to the corpus directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Component, Path, PathBuf};

use serde::Deserialize;
use walkdir::WalkDir;

use super::orchestrator::parallel_map;
use super::source::{Corpus, SourcePair};
use super::PipelineError;
use crate::imaging::Picture;
use crate::records::{ImageRef, SourceDataset};

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

#[derive(Debug, Deserialize)]
struct PromptFile {
    input: String,
    edit: String,
    output: String,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_string_lossy().to_lowercase().as_str()))
        .unwrap_or(false)
}

fn absolute(path: &Path) -> Result<PathBuf, PipelineError> {
    fs::canonicalize(path).map_err(|e| PipelineError::io(path, e))
}

/// `target` relative to `base`, both absolute, `/`-separated.
fn relative_to(target: &Path, base: &Path) -> String {
    let t: Vec<Component> = target.components().collect();
    let b: Vec<Component> = base.components().collect();
    let common = t.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let mut parts: Vec<String> = vec!["..".to_string(); b.len() - common];
    parts.extend(t[common..].iter().map(|c| c.as_os_str().to_string_lossy().into_owned()));
    parts.join("/")
}

fn sanitize_id(raw: &str) -> String {
    raw.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

fn describe(paths: &[PathBuf], out_dir: &Path, parallelism: usize) -> Result<Vec<ImageRef>, PipelineError> {
    parallel_map(paths, parallelism, |path| {
        let picture = Picture::open(path)?;
        Ok(picture.reference(relative_to(path, out_dir)))
    })
    .into_iter()
    .collect()
}

/// Builds a corpus from an InstructPix2Pix-style directory tree.
pub fn convert_instructpix2pix(input: &Path, out_dir: &Path, parallelism: usize) -> Result<Corpus, PipelineError> {
    fs::create_dir_all(out_dir).map_err(|e| PipelineError::io(out_dir, e))?;
    let (input, out_abs) = (absolute(input)?, absolute(out_dir)?);
    let mut pending: Vec<(String, PromptFile, PathBuf, PathBuf)> = Vec::new();
    for entry in WalkDir::new(&input).sort_by_file_name() {
        let entry = entry.map_err(|e| PipelineError::Config(e.to_string()))?;
        if entry.file_name() != "prompt.json" {
            continue;
        }
        let dir = entry.path().parent().expect("file has a parent");
        let text = fs::read_to_string(entry.path()).map_err(|e| PipelineError::io(entry.path(), e))?;
        let prompt: PromptFile = serde_json::from_str(&text).map_err(|e| PipelineError::Corpus {
            path: entry.path().to_path_buf(),
            line: 1,
            message: e.to_string(),
        })?;
        let mut pairs: BTreeMap<String, (Option<PathBuf>, Option<PathBuf>)> = BTreeMap::new();
        for file in fs::read_dir(dir).map_err(|e| PipelineError::io(dir, e))? {
            let path = file.map_err(|e| PipelineError::io(dir, e))?.path();
            if !is_image(&path) {
                continue;
            }
            let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let slot = pairs.entry(stem.rsplit_once('_').map(|(s, _)| s.to_string()).unwrap_or_default());
            match stem.rsplit_once('_').map(|(_, k)| k) {
                Some("0") => slot.or_default().0 = Some(path),
                Some("1") => slot.or_default().1 = Some(path),
                _ => {}
            }
        }
        let dir_name = relative_to(dir, &input);
        for (seed, pair) in pairs {
            match pair {
                (Some(a), Some(b)) => {
                    let id = sanitize_id(&format!("{}_{seed}", dir_name.replace('/', "_")));
                    pending.push((
                        id,
                        PromptFile {
                            input: prompt.input.clone(),
                            edit: prompt.edit.clone(),
                            output: prompt.output.clone(),
                        },
                        a,
                        b,
                    ));
                }
                _ => log::warn!("{}: seed {seed} lacks a complete image pair, skipped", dir.display()),
            }
        }
    }
    let paths: Vec<PathBuf> = pending.iter().flat_map(|(_, _, a, b)| [a.clone(), b.clone()]).collect();
    let refs = describe(&paths, &out_abs, parallelism)?;
    let sources = pending
        .into_iter()
        .zip(refs.chunks(2))
        .map(|((id, prompt, _, _), refs)| SourcePair {
            source_id: id,
            input_image: refs[0].clone(),
            edited_image: Some(refs[1].clone()),
            input_caption: Some(prompt.input),
            edited_caption: Some(prompt.output),
            original_instruction: Some(prompt.edit),
        })
        .collect();
    let corpus = Corpus::new(SourceDataset::InstructPix2Pix, out_dir, sources);
    corpus.save()?;
    Corpus::load(out_dir)
}

/// Builds an image-only corpus from a V3Det-style image tree.
pub fn convert_v3det(input: &Path, out_dir: &Path, parallelism: usize) -> Result<Corpus, PipelineError> {
    fs::create_dir_all(out_dir).map_err(|e| PipelineError::io(out_dir, e))?;
    let (input, out_abs) = (absolute(input)?, absolute(out_dir)?);
    let out_inside = out_abs != input && out_abs.starts_with(&input);
    let mut paths = Vec::new();
    for entry in WalkDir::new(&input).sort_by_file_name() {
        let entry = entry.map_err(|e| PipelineError::Config(e.to_string()))?;
        let generated = out_inside && entry.path().starts_with(&out_abs);
        if entry.file_type().is_file() && is_image(entry.path()) && !generated {
            paths.push(entry.path().to_path_buf());
        }
    }
    let refs = describe(&paths, &out_abs, parallelism)?;
    let mut seen = BTreeMap::new();
    let mut sources = Vec::new();
    for (path, image) in paths.iter().zip(refs) {
        let rel = relative_to(&path.with_extension(""), &input);
        let id = sanitize_id(&rel.replace('/', "_"));
        if let Some(previous) = seen.insert(id.clone(), path.clone()) {
            return Err(PipelineError::Config(format!(
                "{} and {} map to the same source id {id:?}",
                previous.display(),
                path.display()
            )));
        }
        sources.push(SourcePair::image_only(id, image));
    }
    let corpus = Corpus::new(SourceDataset::V3Det, out_dir, sources);
    corpus.save()?;
    Corpus::load(out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn write_image(path: &Path, value: u8) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        RgbImage::from_pixel(8, 6, Rgb([value, 0, 0])).save(path).unwrap();
    }

    #[test]
    fn relative_paths() {
        assert_eq!(relative_to(Path::new("/a/b/c.png"), Path::new("/a")), "b/c.png");
        assert_eq!(relative_to(Path::new("/a/b/c.png"), Path::new("/a/x/y")), "../../b/c.png");
    }

    #[test]
    fn converts_instructpix2pix_tree() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("raw/0001");
        write_image(&raw.join("42_0.png"), 10);
        write_image(&raw.join("42_1.png"), 200);
        write_image(&raw.join("7_0.png"), 10);
        fs::write(
            raw.join("prompt.json"),
            r#"{"input": "photo of fruits", "edit": "turn fruits to a cake", "output": "photo of a cake"}"#,
        )
        .unwrap();
        let corpus = convert_instructpix2pix(&dir.path().join("raw"), &dir.path().join("corpus"), 2).unwrap();
        assert_eq!(corpus.sources.len(), 1);
        let source = &corpus.sources[0];
        assert_eq!(source.source_id, "0001_42");
        assert_eq!(source.original_instruction.as_deref(), Some("turn fruits to a cake"));
        assert_eq!(source.input_image.path, "../raw/0001/42_0.png");
        assert!(Picture::load(&source.input_image, &corpus.root).is_ok());
    }

    #[test]
    fn converts_v3det_tree() {
        let dir = tempfile::tempdir().unwrap();
        write_image(&dir.path().join("raw/cat/001.png"), 1);
        write_image(&dir.path().join("raw/dog/001.png"), 2);
        let corpus = convert_v3det(&dir.path().join("raw"), dir.path(), 1).unwrap();
        let ids: Vec<_> = corpus.sources.iter().map(|s| s.source_id.as_str()).collect();
        assert_eq!(ids, ["cat_001", "dog_001"]);
        assert_eq!(corpus.sources[0].input_image.path, "raw/cat/001.png");
        assert_eq!(corpus.dataset, SourceDataset::V3Det);
    }
}
