//! Dataset records and the JSON-lines shard format.
//!
//! A shard is UTF-8 text with one [`EditSample`] JSON object per line. Keys
//! appear in this fixed order:
//!
//! ```text
//! id, input_image, edited_image, input_caption, edited_caption,
//! direct_instruction, reasoning_instruction, part, provenance
//! ```
//!
//! `ImageRef` objects are `{path, width, height, content_hash}`, boxes are
//! `{x_min, y_min, x_max, y_max}` and provenance is `{source_dataset,
//! source_id, generator_versions, seed, settings, replacement}`. Maps are
//! written with sorted keys. Absent optional values are written as `null`.
//!
//! Every shard `name.jsonl` has a sidecar `name.summary.json` holding the
//! [`ShardSummary`].

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("sample {sample_id}: {invariant}")]
    Invariant { sample_id: String, invariant: String },
    #[error("{path}: line {line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: line {line}: sample {sample_id}: {invariant}")]
    InvalidLine {
        path: PathBuf,
        line: usize,
        sample_id: String,
        invariant: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RecordError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        RecordError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Dataset part a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Part {
    PartI,
    PartII,
    PartIII,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::PartI, Part::PartII, Part::PartIII];

    pub fn label(self) -> &'static str {
        match self {
            Part::PartI => "PartI",
            Part::PartII => "PartII",
            Part::PartIII => "PartIII",
        }
    }

    /// Short suffix used in sample ids (`p1`, `p2`, `p3`).
    pub fn suffix(self) -> &'static str {
        match self {
            Part::PartI => "p1",
            Part::PartII => "p2",
            Part::PartIII => "p3",
        }
    }
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SourceDataset {
    InstructPix2Pix,
    V3Det,
    Fixture,
}

/// A reference to an image file stored next to the records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    /// Relative path, `/`-separated.
    pub path: String,
    pub width: u32,
    pub height: u32,
    /// SHA-256 over the decoded RGB8 pixels and dimensions, see
    /// [`crate::imaging::content_hash`].
    pub content_hash: String,
}

impl ImageRef {
    pub fn validate(&self) -> Result<(), String> {
        if self.width == 0 || self.height == 0 {
            return Err(format!(
                "ImageRef invariant violated: {} has zero dimension {}x{}",
                self.path, self.width, self.height
            ));
        }
        if self.path.is_empty() {
            return Err("ImageRef invariant violated: empty path".to_string());
        }
        Ok(())
    }

    pub fn resolve(&self, root: &Path) -> PathBuf {
        root.join(&self.path)
    }
}

/// Axis-aligned box in pixel coordinates, half-open: `[x_min, x_max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawBox")]
pub struct BoundingBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

#[derive(Deserialize)]
struct RawBox {
    x_min: u32,
    y_min: u32,
    x_max: u32,
    y_max: u32,
}

impl TryFrom<RawBox> for BoundingBox {
    type Error = String;

    fn try_from(raw: RawBox) -> Result<Self, Self::Error> {
        BoundingBox::new(raw.x_min, raw.y_min, raw.x_max, raw.y_max)
    }
}

impl BoundingBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Result<Self, String> {
        if x_min >= x_max || y_min >= y_max {
            return Err(format!(
                "BoundingBox invariant violated: need x_min < x_max and y_min < y_max, got \
                 [{x_min}, {y_min}, {x_max}, {y_max}]"
            ));
        }
        Ok(BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Builds a box from possibly out-of-range float coordinates, clamping to
    /// the image. Returns the box and whether clamping changed anything, or
    /// `None` when nothing of the box is left inside the image.
    pub fn clamped(coords: [f64; 4], width: u32, height: u32) -> Option<(Self, bool)> {
        if coords.iter().any(|c| !c.is_finite()) {
            return None;
        }
        let clamp = |v: f64, hi: u32| v.round().clamp(0.0, hi as f64) as u32;
        let x_min = clamp(coords[0], width);
        let y_min = clamp(coords[1], height);
        let x_max = clamp(coords[2], width);
        let y_max = clamp(coords[3], height);
        let changed = [x_min, y_min, x_max, y_max]
            .iter()
            .zip(coords.iter())
            .any(|(&c, &orig)| c as f64 != orig);
        BoundingBox::new(x_min, y_min, x_max, y_max)
            .ok()
            .map(|b| (b, changed))
    }

    pub fn width(&self) -> u32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }

    pub fn check_within(&self, width: u32, height: u32) -> Result<(), String> {
        if self.x_max > width || self.y_max > height {
            return Err(format!(
                "BoundingBox invariant violated: [{}, {}, {}, {}] exceeds image {}x{}",
                self.x_min, self.y_min, self.x_max, self.y_max, width, height
            ));
        }
        Ok(())
    }

    /// Grows each edge by `fraction` of the box extent along that axis,
    /// clamped to the image.
    pub fn padded(&self, fraction: f64, width: u32, height: u32) -> BoundingBox {
        let dx = (self.width() as f64 * fraction).round() as u32;
        let dy = (self.height() as f64 * fraction).round() as u32;
        BoundingBox {
            x_min: self.x_min.saturating_sub(dx),
            y_min: self.y_min.saturating_sub(dy),
            x_max: (self.x_max + dx).min(width),
            y_max: (self.y_max + dy).min(height),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplacementRecord {
    pub selected_category: String,
    pub target_category: String,
    pub selected_box: BoundingBox,
    pub candidate_categories: Vec<String>,
}

impl ReplacementRecord {
    pub fn validate(&self) -> Result<(), String> {
        if !self.candidate_categories.contains(&self.selected_category) {
            return Err(format!(
                "ReplacementRecord invariant violated: selected category {:?} is not a candidate",
                self.selected_category
            ));
        }
        if self.target_category == self.selected_category {
            return Err(format!(
                "ReplacementRecord invariant violated: target equals selected ({:?})",
                self.selected_category
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub source_dataset: SourceDataset,
    pub source_id: String,
    /// Backend role (`llm`, `captioner`, `extractor`, `detector`,
    /// `inpainter`) to version string.
    pub generator_versions: BTreeMap<String, String>,
    pub seed: u64,
    /// Processing conventions that shaped the sample (resampling, padding,
    /// prompt template hashes, ...).
    pub settings: BTreeMap<String, String>,
    pub replacement: Option<ReplacementRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditSample {
    pub id: String,
    pub input_image: ImageRef,
    pub edited_image: ImageRef,
    pub input_caption: Option<String>,
    pub edited_caption: Option<String>,
    pub direct_instruction: Option<String>,
    pub reasoning_instruction: String,
    pub part: Part,
    pub provenance: ProvenanceRecord,
}

/// Backends every finalized sample of a part must name in its provenance.
pub fn required_backends(part: Part) -> &'static [&'static str] {
    match part {
        Part::PartI => &["llm"],
        Part::PartII | Part::PartIII => &["llm", "extractor", "detector", "inpainter"],
    }
}

impl EditSample {
    /// Checks the invariants of a finalized sample.
    pub fn validate(&self) -> Result<(), RecordError> {
        self.check().map_err(|invariant| RecordError::Invariant {
            sample_id: self.id.clone(),
            invariant,
        })
    }

    fn check(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("EditSample invariant violated: empty id".into());
        }
        self.input_image.validate()?;
        self.edited_image.validate()?;
        if self.reasoning_instruction.trim().is_empty() {
            return Err("EditSample invariant violated: empty reasoning_instruction".into());
        }
        for role in required_backends(self.part) {
            if !self.provenance.generator_versions.contains_key(*role) {
                return Err(format!(
                    "ProvenanceRecord invariant violated: backend {role:?} missing from generator_versions"
                ));
            }
        }
        match (self.part, &self.provenance.replacement) {
            (Part::PartI, Some(_)) => {
                Err("EditSample invariant violated: PartI sample carries a ReplacementRecord".into())
            }
            (Part::PartII | Part::PartIII, None) => Err(format!(
                "EditSample invariant violated: {} sample lacks a ReplacementRecord",
                self.part
            )),
            (_, Some(replacement)) => {
                replacement.validate()?;
                replacement
                    .selected_box
                    .check_within(self.input_image.width, self.input_image.height)
            }
            (Part::PartI, None) => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardSummary {
    pub count: usize,
    pub parts: BTreeMap<Part, usize>,
}

impl ShardSummary {
    pub fn from_samples<'a>(samples: impl IntoIterator<Item = &'a EditSample>) -> Self {
        let mut parts: BTreeMap<Part, usize> = Part::ALL.iter().map(|p| (*p, 0)).collect();
        let mut count = 0;
        for sample in samples {
            *parts.entry(sample.part).or_default() += 1;
            count += 1;
        }
        ShardSummary { count, parts }
    }

    pub fn part(&self, part: Part) -> usize {
        self.parts.get(&part).copied().unwrap_or(0)
    }
}

/// Path of the summary sidecar for a shard: `x.jsonl` → `x.summary.json`.
pub fn summary_path(shard_path: &Path) -> PathBuf {
    let stem = shard_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "shard".to_string());
    shard_path.with_file_name(format!("{stem}.summary.json"))
}

/// Serializes one sample as a single JSON line (without the newline).
pub fn encode_sample(sample: &EditSample) -> String {
    serde_json::to_string(sample).expect("EditSample serialization cannot fail")
}

/// Writes `samples` to `shard_path` plus its summary sidecar.
///
/// Every sample is validated before the file is touched.
pub fn write_shard(samples: &[EditSample], shard_path: &Path) -> Result<ShardSummary, RecordError> {
    for sample in samples {
        sample.validate()?;
    }
    let summary = ShardSummary::from_samples(samples);
    let file = File::create(shard_path).map_err(|e| RecordError::io(shard_path, e))?;
    let mut out = BufWriter::new(file);
    for sample in samples {
        writeln!(out, "{}", encode_sample(sample)).map_err(|e| RecordError::io(shard_path, e))?;
    }
    out.flush().map_err(|e| RecordError::io(shard_path, e))?;

    let sidecar = summary_path(shard_path);
    let mut text = serde_json::to_string_pretty(&summary).expect("summary serialization");
    text.push('\n');
    fs::write(&sidecar, text).map_err(|e| RecordError::io(&sidecar, e))?;
    Ok(summary)
}

/// Reads and validates every sample of a shard.
pub fn read_shard(shard_path: &Path) -> Result<Vec<EditSample>, RecordError> {
    let file = File::open(shard_path).map_err(|e| RecordError::io(shard_path, e))?;
    let mut samples = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| RecordError::io(shard_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: EditSample =
            serde_json::from_str(&line).map_err(|e| RecordError::Malformed {
                path: shard_path.to_path_buf(),
                line: line_no,
                message: e.to_string(),
            })?;
        if let Err(RecordError::Invariant {
            sample_id,
            invariant,
        }) = sample.validate()
        {
            return Err(RecordError::InvalidLine {
                path: shard_path.to_path_buf(),
                line: line_no,
                sample_id,
                invariant,
            });
        }
        samples.push(sample);
    }
    Ok(samples)
}
