use std::path::PathBuf;

use thiserror::Error;

use crate::client::StageTag;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("degenerate crop: {0}")]
    DegenerateCrop(String),

    #[error("proposal in padding: {0}")]
    ProposalInPadding(String),

    #[error("degenerate after clamp: {0}")]
    DegenerateAfterClamp(String),

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("no JSON value found in model output: {excerpt:?}")]
    Parse { excerpt: String },

    #[error("schema violation at {path}: {reason}")]
    Schema { path: String, reason: String },

    #[error("retryable backend error after retries exhausted: {0}")]
    RetryableBackend(String),

    #[error("fatal backend error: {0}")]
    FatalBackend(String),

    #[error("mock scenario has no response for fingerprint {fingerprint} (stage {stage})")]
    MockMiss { fingerprint: String, stage: StageTag },

    #[error("invalid request: {0}")]
    InvalidRequest(String),

    #[error("stage 1 produced no usable regions")]
    NoRegions,

    #[error("stage 1 response could not be parsed: {0}")]
    Stage1Parse(String),

    #[error("stage 2 produced no elements ({failed} of {total} crops failed)")]
    Stage2Empty { failed: usize, total: usize },

    #[error("stage 3 response could not be parsed: {0}")]
    Stage3Parse(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    ImageCodec(#[from] image::ImageError),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidImage(_) => "invalid_image",
            Error::DegenerateCrop(_) => "degenerate_crop",
            Error::ProposalInPadding(_) => "proposal_in_padding",
            Error::DegenerateAfterClamp(_) => "degenerate_after_clamp",
            Error::InvalidBox(_) => "invalid_box",
            Error::Template(_) => "template",
            Error::Parse { .. } => "parse",
            Error::Schema { .. } => "schema",
            Error::RetryableBackend(_) => "retryable_backend",
            Error::FatalBackend(_) => "fatal_backend",
            Error::MockMiss { .. } => "mock_miss",
            Error::InvalidRequest(_) => "invalid_request",
            Error::NoRegions => "no_regions",
            Error::Stage1Parse(_) => "stage1_parse",
            Error::Stage2Empty { .. } => "stage2_empty",
            Error::Stage3Parse(_) => "stage3_parse",
            Error::Config(_) => "config",
            Error::Evaluation(_) => "evaluation",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::ImageCodec(_) => "image_codec",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
