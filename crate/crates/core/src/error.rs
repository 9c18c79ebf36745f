use thiserror::Error;

use crate::cine_data::CineDataError;
use crate::densenet::ModelError;
use crate::evaluation::EvalError;
use crate::gradcam::GradCamError;
use crate::heart_extraction::ExtractionError;
use crate::nn::NnError;
use crate::training::TrainingError;

/// Crate-level error. Every message is prefixed with the module that raised it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cine_data: {0}")]
    CineData(#[from] CineDataError),
    #[error("heart_extraction: {0}")]
    Extraction(#[from] ExtractionError),
    #[error("nn: {0}")]
    Nn(#[from] NnError),
    #[error("densenet3d: {0}")]
    Model(#[from] ModelError),
    #[error("training: {0}")]
    Training(#[from] TrainingError),
    #[error("gradcam: {0}")]
    GradCam(#[from] GradCamError),
    #[error("evaluation: {0}")]
    Evaluation(#[from] EvalError),
    #[error("io: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }
}
