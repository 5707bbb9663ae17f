use std::path::PathBuf;

/// Errors raised by the pipeline core.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error("no ROI: gland mask is empty")]
    NoRoi,
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("lesion cannot fit inside the gland: {0}")]
    LesionDoesNotFit(String),
    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("discriminator collapse: {0}")]
    DiscriminatorCollapse(String),
    #[error("fidelity gate failed: |p(x) - p(x_rec)| = {delta_p:.4} >= {threshold}")]
    FidelityGate { delta_p: f64, threshold: f64 },
    #[error("undefined metric: {0}")]
    Undefined(String),
    #[error("trial protocol violation: {0}")]
    Protocol(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("nifti: {0}")]
    Nifti(String),
    #[error("weights: {0}")]
    Weights(#[from] vbiopsy_autograd::BlobError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
