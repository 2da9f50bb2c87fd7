//! Source corpus manifests.
//!
//! A corpus is a JSON-lines file. The first line is a header
//!
//! ```text
//! {"format": "reasonforge-corpus", "version": 1, "source_dataset": "InstructPix2Pix"}
//! ```
//!
//! and every following line is a [`SourcePair`]. Image paths are relative to
//! the directory holding the corpus file.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::hashing::sha256_hex;
use crate::records::{ImageRef, Part, SourceDataset};

pub const CORPUS_FORMAT: &str = "reasonforge-corpus";
pub const CORPUS_VERSION: u32 = 1;
/// File name used when a corpus is given as a directory.
pub const CORPUS_FILE: &str = "corpus.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusHeader {
    pub format: String,
    pub version: u32,
    pub source_dataset: SourceDataset,
}

/// One source record. Part I sources carry every field; Part II sources an
/// input image and its caption; Part III sources only the image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourcePair {
    pub source_id: String,
    pub input_image: ImageRef,
    #[serde(default)]
    pub edited_image: Option<ImageRef>,
    #[serde(default)]
    pub input_caption: Option<String>,
    #[serde(default)]
    pub edited_caption: Option<String>,
    #[serde(default)]
    pub original_instruction: Option<String>,
}

fn present(field: &Option<String>) -> bool {
    field.as_deref().is_some_and(|s| !s.trim().is_empty())
}

impl SourcePair {
    /// Image-only source.
    pub fn image_only(source_id: impl Into<String>, input_image: ImageRef) -> Self {
        SourcePair {
            source_id: source_id.into(),
            input_image,
            edited_image: None,
            input_caption: None,
            edited_caption: None,
            original_instruction: None,
        }
    }

    /// True when the record has everything Part I needs.
    pub fn is_full_pair(&self) -> bool {
        self.edited_image.is_some()
            && present(&self.input_caption)
            && present(&self.edited_caption)
            && present(&self.original_instruction)
    }

    pub fn has_caption(&self) -> bool {
        present(&self.input_caption)
    }

    /// Parts this source feeds, given the dataset it came from.
    pub fn parts(&self, dataset: SourceDataset) -> Vec<Part> {
        match dataset {
            SourceDataset::InstructPix2Pix => {
                let mut parts = Vec::new();
                if self.is_full_pair() {
                    parts.push(Part::PartI);
                }
                if self.has_caption() {
                    parts.push(Part::PartII);
                }
                parts
            }
            SourceDataset::V3Det => vec![Part::PartIII],
            SourceDataset::Fixture if self.is_full_pair() => vec![Part::PartI, Part::PartII],
            SourceDataset::Fixture => vec![Part::PartIII],
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.source_id.trim().is_empty() {
            return Err("empty source_id".into());
        }
        if self.source_id.contains(['/', '\\']) {
            return Err(format!("source_id {:?} contains a path separator", self.source_id));
        }
        self.input_image.validate()?;
        if let Some(edited) = &self.edited_image {
            edited.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub dataset: SourceDataset,
    /// Directory image paths are resolved against.
    pub root: PathBuf,
    pub sources: Vec<SourcePair>,
    /// SHA-256 of the corpus file bytes.
    pub file_hash: String,
}

/// Accepts either a corpus file or a directory containing `corpus.jsonl`.
pub fn corpus_path(input: &Path) -> PathBuf {
    if input.is_dir() {
        input.join(CORPUS_FILE)
    } else {
        input.to_path_buf()
    }
}

impl Corpus {
    pub fn new(dataset: SourceDataset, root: impl Into<PathBuf>, sources: Vec<SourcePair>) -> Self {
        let mut corpus = Corpus {
            dataset,
            root: root.into(),
            sources,
            file_hash: String::new(),
        };
        corpus.file_hash = sha256_hex(corpus.encode().as_bytes());
        corpus
    }

    pub fn load(input: &Path) -> Result<Self, PipelineError> {
        let path = corpus_path(input);
        let bytes = fs::read(&path).map_err(|e| PipelineError::io(&path, e))?;
        let text = String::from_utf8(bytes.clone()).map_err(|_| PipelineError::Corpus {
            path: path.clone(),
            line: 0,
            message: "not UTF-8".into(),
        })?;
        let bad = |line: usize, message: String| PipelineError::Corpus {
            path: path.clone(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header_line) = lines.next().ok_or_else(|| bad(1, "missing header line".into()))?;
        let header: CorpusHeader = serde_json::from_str(header_line).map_err(|e| bad(1, format!("bad header: {e}")))?;
        if header.format != CORPUS_FORMAT || header.version != CORPUS_VERSION {
            return Err(bad(
                1,
                format!("unsupported corpus format {:?} version {}", header.format, header.version),
            ));
        }
        let mut sources = Vec::new();
        let mut seen = BTreeSet::new();
        for (idx, line) in lines {
            let source: SourcePair = serde_json::from_str(line).map_err(|e| bad(idx + 1, e.to_string()))?;
            source.validate().map_err(|e| bad(idx + 1, e))?;
            if !seen.insert(source.source_id.clone()) {
                return Err(bad(idx + 1, format!("duplicate source_id {:?}", source.source_id)));
            }
            sources.push(source);
        }
        Ok(Corpus {
            dataset: header.source_dataset,
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            sources,
            file_hash: sha256_hex(&bytes),
        })
    }

    /// The corpus file contents: header line then one source per line.
    pub fn encode(&self) -> String {
        let header = CorpusHeader {
            format: CORPUS_FORMAT.into(),
            version: CORPUS_VERSION,
            source_dataset: self.dataset,
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for source in &self.sources {
            out.push_str(&serde_json::to_string(source).expect("source serializes"));
            out.push('\n');
        }
        out
    }

    /// Writes `root/corpus.jsonl`.
    pub fn save(&self) -> Result<PathBuf, PipelineError> {
        fs::create_dir_all(&self.root).map_err(|e| PipelineError::io(&self.root, e))?;
        let path = self.root.join(CORPUS_FILE);
        let mut file = fs::File::create(&path).map_err(|e| PipelineError::io(&path, e))?;
        file.write_all(self.encode().as_bytes())
            .map_err(|e| PipelineError::io(&path, e))?;
        Ok(path)
    }
}
