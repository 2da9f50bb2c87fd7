//! Dataset construction: the divergence pre-pass, the Part I and Part II/III
//! stages, and the resumable orchestrator that runs them over a corpus.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::DEFAULT_MIN_BOX_AREA;
use crate::imaging::{FilterConfig, ImagingError};
use crate::prompts::{DEFAULT_CANDIDATES, DEFAULT_RETRY_BUDGET};
use crate::records::RecordError;

pub mod convert;
pub mod manifest;
pub mod orchestrator;
pub mod source;
pub mod stages;
pub mod stats;

pub use manifest::{EntryStatus, Journal, JournalRecord, ManifestEntry, PipelineManifest};
pub use orchestrator::{
    config_hash, filter_corpus, orchestrate, plan, FilterReport, PlanItem, RunOptions, RunOutcome,
};
pub use source::{Corpus, SourcePair};
pub use stages::{run_part1, run_part23, sample_id, sample_seed, Artifact, StageContext, StageFailure, StageOutput};
pub use stats::{render_stats, stats, RunStats, PUBLISHED_PART_COUNTS};

pub const DEFAULT_BOX_PADDING: f64 = 0.05;
pub const DEFAULT_SHARD_SIZE: usize = 1000;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    Corpus {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("output directory was produced with config hash {found}, this run has {expected}; refusing to resume")]
    ConfigMismatch { expected: String, found: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

impl PipelineError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Settings that shape the generated samples. All of it is hashed into the
/// manifest's config hash; operational knobs (parallelism, rate limits,
/// paths, credentials) live elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub seed: u64,
    pub filter: FilterConfig,
    pub n_candidates: usize,
    pub retry_budget: u32,
    /// Fraction of each box edge added on every side before inpainting.
    pub box_padding: f64,
    pub min_box_area: u64,
    /// Feed Part II from every captioned pair instead of the filtered ones.
    pub part2_unfiltered: bool,
    pub shard_size: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            seed: 0,
            filter: FilterConfig::default(),
            n_candidates: DEFAULT_CANDIDATES,
            retry_budget: DEFAULT_RETRY_BUDGET,
            box_padding: DEFAULT_BOX_PADDING,
            min_box_area: DEFAULT_MIN_BOX_AREA,
            part2_unfiltered: false,
            shard_size: DEFAULT_SHARD_SIZE,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.filter
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.n_candidates == 0 {
            return Err(PipelineError::Config("n_candidates must be at least 1".into()));
        }
        if self.retry_budget == 0 {
            return Err(PipelineError::Config("retry_budget must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.box_padding) {
            return Err(PipelineError::Config(format!("box_padding {} must lie in [0, 1]", self.box_padding)));
        }
        if self.shard_size == 0 {
            return Err(PipelineError::Config("shard_size must be at least 1".into()));
        }
        Ok(())
    }
}
