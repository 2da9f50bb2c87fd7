//! Benchmark construction, image-editing metrics, report rendering and
//! user-study tabulation.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::backends::BackendError;
use crate::imaging::ImagingError;
use crate::pipeline::PipelineError;

pub mod benchmark;
pub mod metrics;
pub mod report;
pub mod user_study;

pub use benchmark::{
    build_benchmark, instantiate_template, read_benchmark, target_caption, write_benchmark, BenchmarkBuild,
    BenchmarkEntry, DEFAULT_TEMPLATES,
};
pub use metrics::{
    aggregate, embed_similarity, evaluate, l1_l2, Aggregate, EditorPredictor, EvalOptions, GroundTruthPredictor,
    InstructionKind, MetricReport, MetricRow, MissingRow, Predictor,
};
pub use report::{render_report, report_json, ReferenceRow, PUBLISHED_RESULTS};
pub use user_study::{
    read_votes, render_user_study, tabulate_user_study, FrequencyTable, Vote, PUBLISHED_USER_STUDY, STUDY_METHODS,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("invalid template {template:?}: {message}")]
    Template { template: String, message: String },
    #[error("benchmark entry {id}: {message}")]
    InvalidEntry { id: String, message: String },
    #[error("vectors have different dimensions {left} and {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("cosine similarity of a zero vector is undefined")]
    ZeroVector,
    #[error("vote {index} names unknown method {method:?}")]
    UnknownMethod { index: usize, method: String },
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

impl EvalError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        EvalError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
