use thiserror::Error;

use crate::model::NucleusId;

/// A per-line count mismatch found while linking one cell file between two
/// consecutive frames.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error(
    "file {file_label}, frames {frame_t}->{}: {parents_left} parent(s) and {children_left} child(ren) left unconsumed",
    frame_t + 1
)]
pub struct ReconciliationError {
    pub file_label: u8,
    pub frame_t: usize,
    /// Parents of frame t that could not be linked.
    pub parents_left: usize,
    /// Children of frame t+1 that were never claimed.
    pub children_left: usize,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("cannot form {k} clusters from {distinct} distinct points")]
    InfeasibleClustering { k: usize, distinct: usize },

    #[error("label {label} is outside 0..{max}")]
    InvalidLabel { label: u32, max: u32 },

    #[error("unknown nucleus {id} in frame {frame}")]
    UnknownNucleus { frame: usize, id: NucleusId },

    #[error("frame {frame} has no nuclei in file {file_label}")]
    MissingFile { frame: usize, file_label: u8 },

    #[error("no correspondence for frame pair starting at frame {0}")]
    MissingCorrespondence(usize),

    #[error(transparent)]
    Reconciliation(#[from] ReconciliationError),

    #[error("malformed link: {0}")]
    MalformedLink(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("covariance is rank deficient (rank {rank})")]
    RankDeficient { rank: usize },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("schema violation: {0}")]
    Schema(String),

    #[error("stage {stage} (frame {frame:?}): {source}")]
    Stage {
        stage: &'static str,
        frame: Option<usize>,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn in_stage(self, stage: &'static str, frame: Option<usize>) -> Self {
        Error::Stage {
            stage,
            frame,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
