use std::path::PathBuf;

use thiserror::Error;

/// Pipeline stages, used to attribute failures in multi-step workflows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    LungSegmentation,
    LungRefinement,
    BoundingBox,
    LesionSegmentation,
    MaskUnion,
    Quantification,
    Windowing,
    AxialExtent,
    SeedMask,
    ActiveContour,
    Closing,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Stage::LungSegmentation => "lung segmentation",
            Stage::LungRefinement => "lung refinement",
            Stage::BoundingBox => "bounding box",
            Stage::LesionSegmentation => "lesion segmentation",
            Stage::MaskUnion => "mask union",
            Stage::Quantification => "quantification",
            Stage::Windowing => "windowing",
            Stage::AxialExtent => "axial extent",
            Stage::SeedMask => "seed mask",
            Stage::ActiveContour => "active contour",
            Stage::Closing => "closing",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse NIfTI file {path}: {message}")]
    NiftiParse { path: PathBuf, message: String },

    #[error("{path} stores 8-bit intensities; 8-bit CT data is not supported")]
    EightBitVolume { path: PathBuf },

    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: [usize; 3],
        actual: [usize; 3],
    },

    #[error("invalid volume geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("mask is empty")]
    EmptyMask,

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    NonFiniteLoss { epoch: usize, loss: f64 },

    #[error("training diverged at epoch {epoch}: non-finite gradient on case {case_id}")]
    NonFiniteGradient { epoch: usize, case_id: String },

    #[error("{stage} failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("unpaired cases: {0:?}")]
    Unpaired(Vec<String>),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// The pipeline stage that failed, if the error was attributed to one.
    pub fn stage(&self) -> Option<Stage> {
        match self {
            Error::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait StageExt<T> {
    fn at_stage(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn at_stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| match e {
            // keep the innermost attribution
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        })
    }
}
