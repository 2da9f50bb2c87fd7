//! L1/L2 pixel distances and embedding cosine similarities between predicted
//! and ground-truth edits.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::benchmark::BenchmarkEntry;
use super::EvalError;
use crate::backends::{BackendSuite, Embedders};
use crate::imaging::{divergence, resize_bilinear, Picture, PixelGrid, DEFAULT_CANONICAL_SIZE};
use crate::pipeline::orchestrator::parallel_map;

/// Per-element mean absolute and mean squared difference. L2 is the same
/// quantity as [`divergence`].
pub fn l1_l2(pred: &PixelGrid, gt: &PixelGrid) -> Result<(f64, f64), EvalError> {
    let l2 = divergence(pred, gt)?;
    let n = pred.values().len() as f64;
    let l1 = pred
        .values()
        .iter()
        .zip(gt.values())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n;
    Ok((l1, l2))
}

/// Cosine similarity, clamped to [-1, 1].
pub fn embed_similarity(pred: &[f64], gt: &[f64]) -> Result<f64, EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::DimensionMismatch {
            left: pred.len(),
            right: gt.len(),
        });
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let (np, ng) = (norm(pred), norm(gt));
    if np == 0.0 || ng == 0.0 || !np.is_finite() || !ng.is_finite() {
        return Err(EvalError::ZeroVector);
    }
    let dot: f64 = pred.iter().zip(gt).map(|(a, b)| a * b).sum();
    Ok((dot / (np * ng)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstructionKind {
    Direct,
    Reasoning,
}

impl InstructionKind {
    pub const ALL: [InstructionKind; 2] = [InstructionKind::Direct, InstructionKind::Reasoning];

    pub fn label(self) -> &'static str {
        match self {
            InstructionKind::Direct => "direct",
            InstructionKind::Reasoning => "reasoning",
        }
    }

    pub fn instruction(self, entry: &BenchmarkEntry) -> &str {
        match self {
            InstructionKind::Direct => &entry.direct_instruction,
            InstructionKind::Reasoning => &entry.reasoning_instruction,
        }
    }
}

/// Source of predicted edits.
pub trait Predictor: Sync {
    fn name(&self) -> String;
    fn predict(&self, entry: &BenchmarkEntry, input: &Picture, root: &Path, kind: InstructionKind)
        -> Result<Picture, String>;
}

/// Runs the suite's conditioned editor on the instruction of each kind.
pub struct EditorPredictor<'a> {
    pub suite: &'a BackendSuite,
}

impl Predictor for EditorPredictor<'_> {
    fn name(&self) -> String {
        format!("editor {}", self.suite.version_of("editor"))
    }

    fn predict(&self, entry: &BenchmarkEntry, input: &Picture, _: &Path, kind: InstructionKind) -> Result<Picture, String> {
        self.suite
            .conditioned_edit(input, kind.instruction(entry))
            .map(|served| served.value)
            .map_err(|e| e.to_string())
    }
}

/// Returns the ground-truth edit itself.
pub struct GroundTruthPredictor;

impl Predictor for GroundTruthPredictor {
    fn name(&self) -> String {
        "ground truth".into()
    }

    fn predict(&self, entry: &BenchmarkEntry, _: &Picture, root: &Path, _: InstructionKind) -> Result<Picture, String> {
        Picture::load(&entry.gt_edited_image, root).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub canonical_size: u32,
    pub parallelism: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            canonical_size: DEFAULT_CANONICAL_SIZE,
            parallelism: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub id: String,
    pub kind: InstructionKind,
    pub l1: f64,
    pub l2: f64,
    pub clip_i: f64,
    pub dino: f64,
    pub clip_t: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingRow {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub l1: f64,
    pub l2: f64,
    pub clip_i: f64,
    pub dino: f64,
    pub clip_t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub kind: InstructionKind,
    pub predictor: String,
    pub canonical_size: u32,
    pub rows: Vec<MetricRow>,
    pub missing: Vec<MissingRow>,
    /// None when every row is missing.
    pub aggregate: Option<Aggregate>,
}

/// Arithmetic mean of each column, summed in id order.
pub fn aggregate(rows: &[MetricRow]) -> Option<Aggregate> {
    if rows.is_empty() {
        return None;
    }
    let mut sorted: Vec<&MetricRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let n = sorted.len() as f64;
    let mean = |f: fn(&MetricRow) -> f64| sorted.iter().map(|r| f(r)).sum::<f64>() / n;
    Some(Aggregate {
        count: sorted.len(),
        l1: mean(|r| r.l1),
        l2: mean(|r| r.l2),
        clip_i: mean(|r| r.clip_i),
        dino: mean(|r| r.dino),
        clip_t: mean(|r| r.clip_t),
    })
}

fn evaluate_entry(
    entry: &BenchmarkEntry,
    root: &Path,
    predictor: &dyn Predictor,
    embedders: &Embedders,
    kind: InstructionKind,
    size: u32,
) -> Result<MetricRow, String> {
    let input = Picture::load(&entry.input_image, root).map_err(|e| format!("input image: {e}"))?;
    let gt = Picture::load(&entry.gt_edited_image, root).map_err(|e| format!("ground truth: {e}"))?;
    let pred = predictor.predict(entry, &input, root, kind)?;
    let (l1, l2) = l1_l2(&resize_bilinear(&pred.rgb, size), &resize_bilinear(&gt.rgb, size)).map_err(|e| e.to_string())?;
    let image_sim = |embedder: &dyn crate::backends::ImageEmbedder| -> Result<f64, String> {
        let a = embedder.embed_image(&pred).map_err(|e| e.to_string())?;
        let b = embedder.embed_image(&gt).map_err(|e| e.to_string())?;
        embed_similarity(&a, &b).map_err(|e| e.to_string())
    };
    let clip_i = image_sim(embedders.clip_image.as_ref())?;
    let dino = image_sim(embedders.dino_image.as_ref())?;
    let text = embedders
        .clip_text
        .embed_text(&entry.target_caption)
        .map_err(|e| e.to_string())?;
    let image = embedders.clip_image.embed_image(&pred).map_err(|e| e.to_string())?;
    let clip_t = embed_similarity(&text, &image).map_err(|e| e.to_string())?;
    Ok(MetricRow {
        id: entry.id.clone(),
        kind,
        l1,
        l2,
        clip_i,
        dino,
        clip_t,
    })
}

/// Scores `predictor` on every entry. Failed entries become missing rows and
/// are left out of the aggregate.
pub fn evaluate(
    benchmark: &[BenchmarkEntry],
    root: &Path,
    predictor: &dyn Predictor,
    embedders: &Embedders,
    kind: InstructionKind,
    opts: EvalOptions,
) -> Result<MetricReport, EvalError> {
    if opts.canonical_size == 0 {
        return Err(EvalError::Imaging(crate::imaging::ImagingError::ZeroDimension(
            "canonical size".into(),
        )));
    }
    let results = parallel_map(benchmark, opts.parallelism, |entry| {
        evaluate_entry(entry, root, predictor, embedders, kind, opts.canonical_size)
    });
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for (entry, result) in benchmark.iter().zip(results) {
        match result {
            Ok(row) => rows.push(row),
            Err(reason) => {
                log::warn!("evaluate: {} missing: {reason}", entry.id);
                missing.push(MissingRow {
                    id: entry.id.clone(),
                    reason,
                });
            }
        }
    }
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    missing.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(MetricReport {
        kind,
        predictor: predictor.name(),
        canonical_size: opts.canonical_size,
        aggregate: aggregate(&rows),
        rows,
        missing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_grids() {
        let a = PixelGrid::constant(8, 8, 0.25).unwrap();
        let b = PixelGrid::constant(8, 8, 0.75).unwrap();
        assert_eq!(l1_l2(&a, &b).unwrap(), (0.5, 0.25));
        assert_eq!(l1_l2(&a, &a).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn mismatched_grids_error() {
        let a = PixelGrid::constant(8, 8, 0.25).unwrap();
        let b = PixelGrid::constant(4, 8, 0.25).unwrap();
        assert!(l1_l2(&a, &b).is_err());
    }

    #[test]
    fn cosine_cases() {
        let expected = 32.0 / (14.0f64.sqrt() * 77.0f64.sqrt());
        assert!((embed_similarity(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap() - expected).abs() < 1e-12);
        assert_eq!(embed_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(embed_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(EvalError::ZeroVector)));
        assert!(matches!(embed_similarity(&[1.0], &[1.0, 0.0]), Err(EvalError::DimensionMismatch { .. })));
    }

    #[test]
    fn aggregate_of_nothing() {
        assert!(aggregate(&[]).is_none());
    }

    proptest! {
        #[test]
        fn cosine_bounded(v in prop::collection::vec(-10.0f64..10.0, 1..16), w in prop::collection::vec(-10.0f64..10.0, 1..16)) {
            let n = v.len().min(w.len());
            if let Ok(s) = embed_similarity(&v[..n], &w[..n]) {
                prop_assert!((-1.0..=1.0).contains(&s));
            }
        }

        #[test]
        fn l1_l2_bounds(values in prop::collection::vec(0.0f64..=1.0, 96)) {
            let a = PixelGrid::new(4, 4, values[..48].to_vec()).unwrap();
            let b = PixelGrid::new(4, 4, values[48..].to_vec()).unwrap();
            let (l1, l2) = l1_l2(&a, &b).unwrap();
            prop_assert!(l1 >= 0.0 && l2 >= 0.0);
            prop_assert!(l2 <= l1 + 1e-15);
            prop_assert_eq!(l2, divergence(&a, &b).unwrap());
        }
    }
}
